"""Cross-validation, confidence-voting inference and experiment reports."""

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from erp_forge import pipeline as pl
from erp_forge.errors import TooFewSamples
from erp_forge.metrics import TTestResult, balanced_accuracy, paired_ttest, roc_auc  # noqa: F401
from erp_forge.models import ModelSpec, as_network_input, build_model
from erp_forge.train import TrainConfig, train_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_kfold(labels, k=5, seed=0):
    """Per-class round-robin folds after a seeded shuffle.

    Fold ``i`` is the test set, fold ``(i + 1) % k`` validation, the rest training.
    """
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < k:
            raise TooFewSamples(f"class {c} has {len(idx)} trials, fewer than k={k}")
        fold_of[rng.permutation(idx)] = np.arange(len(idx)) % k
    splits = []
    for i in range(k):
        v = (i + 1) % k
        splits.append(FoldSplit(
            i,
            np.flatnonzero((fold_of != i) & (fold_of != v)),
            np.flatnonzero(fold_of == v),
            np.flatnonzero(fold_of == i),
        ))
    return splits


def select_confident(probs, offsets=None):
    """Pick, per trial, the shift whose softmax has the largest maximum entry.

    ``probs`` is ``(D, N, 2)`` (or ``(D, 2)`` for one trial). Ties go to the
    smaller ``|offset|``, then to label 0. Returns ``(labels, confidence,
    chosen_probs)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p = p[:, None, :]
    d, n, _ = p.shape
    offs = np.zeros(d) if offsets is None else np.abs(np.asarray(offsets, dtype=float))
    conf = p.max(axis=2)
    lab = p.argmax(axis=2)
    # lexicographic: highest confidence, then smallest |shift|, then label 0
    order = np.lexsort((lab, np.broadcast_to(offs[:, None], (d, n)), -conf), axis=0)
    best = order[0]
    cols = np.arange(n)
    labels, confidence, chosen = lab[best, cols], conf[best, cols], p[best, cols]
    if single:
        return int(labels[0]), float(confidence[0]), chosen[0]
    return labels, confidence, chosen


def shift_inputs(stack, family):
    """Per-shift model inputs from trial stacks ``(N, C, T, D)``.

    3D models see each slice repeated ``D`` times; 2D models see the slice alone.
    """
    d = stack.shape[-1]
    for j in range(d):
        sl = stack[..., j]
        yield np.repeat(sl[..., None], d, axis=-1) if family == "3d" else sl


def tta_predict(network, stack, offsets, family=None, batch_size=32):
    """Confidence-voting prediction over the shifted copies in ``stack``.

    ``stack`` is ``(N, C, T, D)`` or a single trial ``(C, T, D)``.
    """
    family = family or network.spec.family
    single = np.ndim(stack) == 3
    s = np.asarray(stack)[None] if single else np.asarray(stack)
    probs = np.stack([network.predict(as_network_input(x), batch_size) for x in shift_inputs(s, family)])
    out = select_confident(probs, offsets)
    if single:
        return int(out[0][0]), float(out[1][0])
    return out


def positive_scores(labels, confidence):
    """P(label 1) of the selected softmax rows."""
    return np.where(np.asarray(labels) == 1, confidence, 1.0 - np.asarray(confidence))


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: str = "3d"
    variant: str = "gap"
    folds: int = 5
    seed: int = 0
    tta: bool = None
    train: TrainConfig = TrainConfig()
    preprocess: pl.PreprocessConfig = field(default_factory=pl.PreprocessConfig)
    loss: object = None
    activation: str = None

    def __post_init__(self):
        if self.pipeline not in pl.PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; choose from {pl.PIPELINES}")
        self.model_spec(32)  # validates the variant against the family

    @property
    def family(self):
        return "3d" if self.pipeline == "3d" else "2d"

    @property
    def use_tta(self):
        return self.family == "3d" if self.tta is None else bool(self.tta)

    @property
    def name(self):
        return f"{self.pipeline}-{self.variant}"

    def model_spec(self, n_channels):
        return ModelSpec(self.family, self.variant, pl.input_shape(self.pipeline, self.preprocess, n_channels),
                         activation=self.activation, loss=self.loss)


def unit_seed(seed, participant, fold):
    return int(np.random.SeedSequence([seed, participant, fold]).generate_state(1)[0])


@dataclass
class FoldResult:
    participant: int
    fold: int
    auc: float
    balanced_accuracy: float
    best_epoch: int
    epochs_run: int
    best_val_auc: float


def evaluate_network(net, test, config):
    """Returns (auc, balanced accuracy) on a test TrialTensor."""
    if config.family == "3d" or config.use_tta:
        stack = test.data if config.family == "3d" else test.data[..., None]
        offsets = config.preprocess.shifts.offsets if stack.shape[-1] > 1 else None
        if config.use_tta:
            labels, conf, _ = tta_predict(net, stack, offsets, config.family)
            scores = positive_scores(labels, conf)
        else:
            probs = net.predict(as_network_input(test.data))
            scores, labels = probs[:, 1], probs.argmax(axis=1)
    else:
        probs = net.predict(as_network_input(test.data))
        scores, labels = probs[:, 1], probs.argmax(axis=1)
    return roc_auc(scores, test.labels), balanced_accuracy(labels, test.labels)


def split_seed(seed, participant):
    # separate stream from the per-fold training seeds
    return int(np.random.SeedSequence([seed, participant, 0x5EED]).generate_state(1)[0])


def prepare_participant(recording, config, participant=0):
    """``(prepared trials, labels, splits)`` for one participant."""
    base = pl.base_trials(recording, config.preprocess)
    prepared = pl.fold_independent(config.pipeline, base, config.preprocess)
    splits = stratified_kfold(base.labels, config.folds, split_seed(config.seed, participant))
    return prepared, base.labels, splits


def train_unit(prepared, labels, split, config, participant, n_channels):
    """Train one (participant, fold); returns (network, history, fold data, train result)."""
    fd = pl.fold_inputs(config.pipeline, prepared, labels, split, config.preprocess)
    seed = unit_seed(config.seed, participant, split.fold_index)
    spec = config.model_spec(n_channels)
    tc = TrainConfig(**{**config.train.__dict__, "seed": seed})
    res = train_model(spec, fd.train, fd.val, tc)
    return res, fd


def _run_unit(args):
    prepared, labels, split, config, participant, n_channels = args
    res, fd = train_unit(prepared, labels, split, config, participant, n_channels)
    auc, bacc = evaluate_network(res.network, fd.test, config)
    log.info("participant %d fold %d: auc %.4f bacc %.4f (best epoch %d)",
             participant + 1, split.fold_index, auc, bacc, res.best_epoch)
    return FoldResult(participant, split.fold_index, auc, bacc, res.best_epoch, len(res.history), res.best_val_auc)


def run_experiment(recordings, config, jobs=1, participants=None):
    """Cross-validate ``config`` on every recording; returns an EvalReport."""
    units = []
    ids = list(participants) if participants is not None else list(range(len(recordings)))
    for p, rec in zip(ids, recordings):
        prepared, labels, splits = prepare_participant(rec, config, p)
        n_ch = rec.samples.shape[0]
        units += [(prepared, labels, s, config, p, n_ch) for s in splits]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_unit, units))
    else:
        results = [_run_unit(u) for u in units]
    results.sort(key=lambda r: (r.participant, r.fold))
    return EvalReport(config.name, results)


@dataclass
class EvalReport:
    """Per-fold results of one architecture; participants are summarised by fold means."""

    model: str
    folds: list

    def participants(self):
        return sorted({r.participant for r in self.folds})

    def per_participant(self, metric="auc"):
        out = []
        for p in self.participants():
            vals = [getattr(r, metric) for r in self.folds if r.participant == p]
            out.append(float(np.mean(vals)))
        return np.asarray(out)

    def summary(self, metric="auc"):
        v = self.per_participant(metric)
        sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        return float(v.mean()), sd

    FOLD_FIELDS = ("model", "participant", "fold", "auc", "balanced_accuracy", "best_epoch", "epochs_run",
                   "best_val_auc")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FOLD_FIELDS)
        for r in self.folds:
            w.writerow([self.model, r.participant + 1, r.fold, f"{r.auc:.6f}", f"{r.balanced_accuracy:.6f}",
                        r.best_epoch, r.epochs_run, f"{r.best_val_auc:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty report")
        folds = [FoldResult(int(r["participant"]) - 1, int(r["fold"]), float(r["auc"]),
                            float(r["balanced_accuracy"]), int(r["best_epoch"]), int(r["epochs_run"]),
                            float(r["best_val_auc"])) for r in rows]
        return cls(rows[0]["model"], folds)

    def to_text(self):
        return format_table([self])


def format_table(reports, against=None):
    """Aligned per-participant table (one AUC column per report, plus
    balanced accuracy for a single report) with a mean (+/- std) row."""
    cols = [r.model for r in reports]
    single = len(reports) == 1
    header = ["Participant"] + [f"{c} AUC" for c in cols] + (["Balanced acc."] if single else [])
    ps = reports[0].participants()
    body = []
    per = [r.per_participant("auc") for r in reports]
    bacc = reports[0].per_participant("balanced_accuracy")
    for i, p in enumerate(ps):
        row = [str(p + 1)] + [f"{v[i]:.3f}" for v in per]
        if single:
            row.append(f"{bacc[i]:.3f}")
        body.append(row)
    foot = ["Mean (± Std. Dev.)"]
    for r in reports:
        m, s = r.summary("auc")
        foot.append(f"{m:.3f} (± {s:.3f})")
    if single:
        m, s = reports[0].summary("balanced_accuracy")
        foot.append(f"{m:.3f} (± {s:.3f})")
    table = [header] + body + [foot]
    widths = [max(len(row[j]) for row in table) for j in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.insert(len(lines) - 1, "  ".join("-" * w for w in widths))
    if len(reports) == 2:
        lines.append("")
        label = f"paired t-test ({reports[0].model} vs {reports[1].model}): "
        try:
            tt = compare(reports[0], reports[1])
            lines.append(label + f"t = {tt.t:.3f}, df = {tt.df}, p = {tt.p:.3g}")
        except ValueError as exc:
            lines.append(label + f"undefined ({exc})")
    return "\n".join(lines) + "\n"


def compare(a, b, alternative="two-sided"):
    """Paired t-test on per-participant AUC of two reports."""
    if a.participants() != b.participants():
        raise ValueError("reports cover different participants")
    return paired_ttest(a.per_participant("auc"), b.per_participant("auc"), alternative)
