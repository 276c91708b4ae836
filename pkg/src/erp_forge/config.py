"""Run configuration stored as TOML.

Every default is materialised when a config is saved, so the archived copy in
an output directory fully describes the run. See README for the key list.
"""

import dataclasses
import glob
import os
import sys

import tomli_w

from erp_forge.augment import ShiftSet
from erp_forge.errors import ErpForgeError
from erp_forge.evaluation import ExperimentConfig
from erp_forge.losses import LossSpec
from erp_forge.pipeline import PreprocessConfig
from erp_forge.spatial import DEFAULT_GRID, ElectrodeGrid
from erp_forge.synth import SynthConfig
from erp_forge.train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or unreadable configuration (a usage error)."""


SOURCES = ("bdf", "synth")


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "erp_forge_run"
    source: str = "synth"
    bdf_paths: list = dataclasses.field(default_factory=list)
    pipeline: str = "3d"
    variant: str = "gap"
    activation: str = None
    loss: str = None
    focal_gamma: float = 2.0
    class_weights: list = None
    folds: int = 5
    tta: bool = None
    preprocess: PreprocessConfig = dataclasses.field(default_factory=PreprocessConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)

    def loss_spec(self):
        if self.loss is None:
            return None
        return LossSpec(self.loss, tuple(self.class_weights) if self.class_weights else None, self.focal_gamma)

    def experiment(self):
        try:
            return ExperimentConfig(self.pipeline, self.variant, self.folds, self.seed, self.tta, self.train,
                                    self.preprocess, self.loss_spec(), self.activation)
        except (ErpForgeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolve_paths(self, base="."):
        paths = []
        for p in self.bdf_paths:
            p = p if os.path.isabs(p) else os.path.join(base, p)
            hits = sorted(glob.glob(p)) if any(ch in p for ch in "*?[") else [p]
            paths.extend(hits)
        return paths

    def to_dict(self):
        pre = dataclasses.asdict(self.preprocess)
        pre["shifts"] = list(self.preprocess.shifts.offsets)
        pre["grid"] = [" ".join(row) for row in self.preprocess.grid.to_rows()]
        model = {"pipeline": self.pipeline, "variant": self.variant, "focal_gamma": self.focal_gamma}
        for key in ("activation", "loss", "class_weights"):
            if getattr(self, key) is not None:
                model[key] = getattr(self, key)
        ev = {"folds": self.folds}
        if self.tta is not None:
            ev["tta"] = self.tta
        synth = dataclasses.asdict(self.synth)
        synth["noise_band_hz"] = list(self.synth.noise_band_hz)
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": {"source": self.source, "bdf_paths": list(self.bdf_paths)},
            "model": model,
            "eval": ev,
            "preprocess": pre,
            "train": dataclasses.asdict(self.train),
            "synth": synth,
        }

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_toml())


def _take(section, cls, name, convert=None):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(extra))}")
    kwargs = dict(section)
    if convert:
        kwargs = convert(kwargs)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, ErpForgeError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _preprocess_fields(kw):
    if "shifts" in kw:
        kw["shifts"] = ShiftSet(tuple(kw["shifts"]))
    if "grid" in kw:
        kw["grid"] = ElectrodeGrid.from_rows([row.split() for row in kw["grid"]])
    return kw


def _synth_fields(kw):
    if "noise_band_hz" in kw:
        kw["noise_band_hz"] = tuple(kw["noise_band_hz"])
    return kw


def from_dict(doc):
    doc = dict(doc)
    allowed = {"seed", "output_dir", "data", "model", "eval", "preprocess", "train", "synth"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(extra))}")
    data = dict(doc.get("data", {}))
    model = dict(doc.get("model", {}))
    ev = dict(doc.get("eval", {}))
    for name, sec, keys in (("data", data, {"source", "bdf_paths"}),
                            ("model", model, {"pipeline", "variant", "activation", "loss", "focal_gamma",
                                              "class_weights"}),
                            ("eval", ev, {"folds", "tta"})):
        extra = set(sec) - keys
        if extra:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(extra))}")
    source = data.get("source", "synth")
    if source not in SOURCES:
        raise ConfigError(f"[data] source must be one of {SOURCES}")
    try:
        cfg = RunConfig(
            seed=int(doc.get("seed", 0)),
            output_dir=str(doc.get("output_dir", "erp_forge_run")),
            source=source,
            bdf_paths=list(data.get("bdf_paths", [])),
            pipeline=model.get("pipeline", "3d"),
            variant=model.get("variant", "gap"),
            activation=model.get("activation"),
            loss=model.get("loss"),
            focal_gamma=float(model.get("focal_gamma", 2.0)),
            class_weights=model.get("class_weights"),
            folds=int(ev.get("folds", 5)),
            tta=ev.get("tta"),
            preprocess=_take(doc.get("preprocess", {}), PreprocessConfig, "preprocess", _preprocess_fields),
            train=_take(doc.get("train", {}), TrainConfig, "train"),
            synth=_take(doc.get("synth", {}), SynthConfig, "synth", _synth_fields),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    cfg.experiment()  # validate pipeline / variant / loss
    return cfg


def load(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(doc)
    if not os.path.isabs(cfg.output_dir):
        cfg.output_dir = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.output_dir)
    cfg.bdf_paths = cfg.resolve_paths(os.path.dirname(os.path.abspath(path)))
    return cfg


def default_grid_rows():
    return [" ".join(row) for row in DEFAULT_GRID.to_rows()]
