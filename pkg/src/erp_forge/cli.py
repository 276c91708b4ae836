"""``erp-forge`` command line.

Exit codes: 0 success, 1 domain error (bad data, degenerate input),
2 usage or I/O error.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from erp_forge import bdf_io, config as cfgmod, dsp, evaluation as ev, models, synth
from erp_forge.errors import ErpForgeError
from erp_forge.nn import load_checkpoint, save_checkpoint
from erp_forge.train import write_history

log = logging.getLogger("erp_forge")


class UsageError(Exception):
    pass


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _load_config(args):
    if args.config is None:
        cfg = cfgmod.RunConfig()
    else:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = cfgmod.load(args.config)
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg


def _archive(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.output_dir, "config.toml"))


def _recordings(cfg, jobs=1):
    """(participant ids, recordings) for the configured data source."""
    if cfg.source == "synth":
        ids = list(range(cfg.synth.n_participants))
        recs = _map(_synth_recording, [(cfg.synth, p) for p in ids], jobs)
        return ids, recs
    if not cfg.bdf_paths:
        raise UsageError("[data] bdf_paths is empty")
    missing = [p for p in cfg.bdf_paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"BDF file(s) not found: {', '.join(missing)}")
    return list(range(len(cfg.bdf_paths))), _map(bdf_io.load_recording, list(cfg.bdf_paths), jobs)


def _synth_recording(args):
    scfg, p = args
    # round-trip through the BDF codec so synthetic runs exercise the parser
    return bdf_io.load_recording(synth.to_bdf_bytes(synth.generate_participant(scfg, p)))


def _units(cfg, jobs):
    exp = cfg.experiment()
    ids, recs = _recordings(cfg, jobs)
    units = []
    for p, rec in zip(ids, recs):
        prepared, labels, splits = ev.prepare_participant(rec, exp, p)
        units += [(prepared, labels, s, exp, p, rec.samples.shape[0]) for s in splits]
    return exp, units


def _unit_name(p, fold):
    return f"p{p + 1:02d}_fold{fold}"


def cmd_parse(args):
    header, rec = bdf_io.parse_bdf(args.file)
    labeled = bdf_io.label_events(rec.events)
    n_t = sum(e.label == 1 for e in labeled)
    print(f"file            {args.file}")
    print(f"channels        {len(rec.labels)}")
    print(f"sample rate     {rec.sample_rate_hz:g} Hz")
    print(f"samples         {rec.n_samples} ({rec.n_samples / rec.sample_rate_hz:.2f} s)")
    print(f"events          {len(rec.events)}")
    print(f"targets         {n_t}")
    print(f"non-targets     {len(labeled) - n_t}")
    print(f"discarded codes {len(rec.events) - len(labeled)}")
    text = bdf_io.events_to_csv(rec.events, labeled)
    if args.events_csv:
        with open(args.events_csv, "w") as fh:
            fh.write(text)
    return 0


def cmd_synth(args):
    cfg = _load_config(args)
    scfg = cfg.synth
    if args.participants is not None:
        scfg = synth.SynthConfig(**{**scfg.__dict__, "n_participants": args.participants})
    out = args.out or os.path.join(cfg.output_dir, "data")
    os.makedirs(out, exist_ok=True)

    paths = _map(_write_one, [(scfg, p, out) for p in range(scfg.n_participants)], args.jobs)
    for p in paths:
        print(p)
    return 0


def _write_one(args):
    scfg, p, out = args
    path = os.path.join(out, synth.participant_filename(p))
    with open(path, "wb") as fh:
        fh.write(synth.to_bdf_bytes(synth.generate_participant(scfg, p)))
    return path


def cmd_preprocess(args):
    cfg = _load_config(args)
    _archive(cfg)
    exp, units = _units(cfg, args.jobs)
    out = os.path.join(cfg.output_dir, "folds")
    os.makedirs(out, exist_ok=True)
    for prepared, labels, split, exp, p, _ in units:
        fd = ev.pl.fold_inputs(exp.pipeline, prepared, labels, split, exp.preprocess)
        stem = os.path.join(out, _unit_name(p, split.fold_index))
        for part in ("train", "val", "test"):
            dsp.save_trials(f"{stem}_{part}.erpt", getattr(fd, part))
        if fd.csp is not None:
            fd.csp.save(f"{stem}_csp.erpc")
    print(f"wrote {len(units)} fold(s) to {out}")
    return 0


def _train_one(args):
    unit, out = args
    prepared, labels, split, exp, p, n_ch = unit
    res, _ = ev.train_unit(prepared, labels, split, exp, p, n_ch)
    name = _unit_name(p, split.fold_index)
    save_checkpoint(res.network, os.path.join(out, "checkpoints", f"{name}.erpw"))
    write_history(res.history, os.path.join(out, "history", f"{name}.csv"))
    return name, res.best_epoch, res.best_val_auc


def cmd_train(args):
    cfg = _load_config(args)
    _archive(cfg)
    for sub in ("checkpoints", "history"):
        os.makedirs(os.path.join(cfg.output_dir, sub), exist_ok=True)
    _, units = _units(cfg, args.jobs)
    for name, best, auc in _map(_train_one, [(u, cfg.output_dir) for u in units], args.jobs):
        print(f"{name}: best epoch {best}, validation AUC {auc:.4f}")
    return 0


def _eval_one(args):
    unit, out = args
    prepared, labels, split, exp, p, n_ch = unit
    fd = ev.pl.fold_inputs(exp.pipeline, prepared, labels, split, exp.preprocess)
    path = os.path.join(out, "checkpoints", f"{_unit_name(p, split.fold_index)}.erpw")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path}; run `erp-forge train` first")
    net = load_checkpoint(models.build_model(exp.model_spec(n_ch)), path)
    auc, bacc = ev.evaluate_network(net, fd.test, exp)
    hist = os.path.join(out, "history", f"{_unit_name(p, split.fold_index)}.csv")
    best_epoch, epochs, best_val = -1, 0, float("nan")
    if os.path.exists(hist):
        rows = np.genfromtxt(hist, delimiter=",", names=True, ndmin=1)
        epochs = len(rows)
        if epochs:
            best_val = float(rows["val_auc"].max())
            best_epoch = int(rows["epoch"][int(np.argmax(rows["val_auc"]))])
    return ev.FoldResult(p, split.fold_index, auc, bacc, best_epoch, epochs, best_val)


def cmd_eval(args):
    cfg = _load_config(args)
    exp, units = _units(cfg, args.jobs)
    results = _map(_eval_one, [(u, cfg.output_dir) for u in units], args.jobs)
    results.sort(key=lambda r: (r.participant, r.fold))
    report = ev.EvalReport(exp.name, results)
    stem = os.path.join(cfg.output_dir, f"report_{exp.name}")
    with open(stem + ".csv", "w") as fh:
        fh.write(report.to_csv())
    with open(stem + ".txt", "w") as fh:
        fh.write(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def cmd_report(args):
    reports = []
    for path in args.reports:
        with open(path) as fh:
            reports.append(ev.EvalReport.from_csv(fh.read()))
    text = ev.format_table(reports)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_models_list(args):
    rows = models.catalog()
    head = ("model", "input", "activation", "loss", "params")
    table = [head] + [tuple(str(r[k]) for k in ("name", "input", "activation", "loss", "params")) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(head))]
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="erp-forge", description="ERP classification pipeline")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if config:
            sp.add_argument("--config", help="run configuration (TOML); defaults when omitted")
            sp.add_argument("--output-dir", help="override output_dir from the config")

    sp = sub.add_parser("parse", help="summarise a BDF file and export its events")
    sp.add_argument("file")
    sp.add_argument("--events-csv", help="write events (sample, code, label) here")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_parse)

    sp = sub.add_parser("synth", help="write a synthetic dataset as BDF files")
    sp.add_argument("--out", help="output directory (default: <output_dir>/data)")
    sp.add_argument("--participants", type=int)
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    for name, fn, text in (("preprocess", cmd_preprocess, "write per-fold ERPT trial containers"),
                           ("train", cmd_train, "train one model per participant and fold"),
                           ("eval", cmd_eval, "evaluate trained checkpoints and write the report")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("report", help="tabulate report CSVs (two reports add a paired t-test)")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("models", help="architecture catalog")
    msub = sp.add_subparsers(dest="models_command", required=True)
    lp = msub.add_parser("list", help="list architectures with parameter counts")
    common(lp, config=False)
    lp.set_defaults(fn=cmd_models_list)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"erp-forge: error: {exc}", file=sys.stderr)
        return 2
    except ErpForgeError as exc:
        print(f"erp-forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"erp-forge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
