"""``robusteeg`` command line: synth, preprocess, train, evaluate, sweep,
ablation, gradcheck and params.

Failures print one line, ``robusteeg: error: <ErrorClass>: <message>``, to
stderr and exit nonzero (2 usage/config, 3 unreadable or malformed files,
4 invalid values, 1 failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attacks import AttackConfig, ThreatModel
from .config import ConfigError
from .datasets import DatasetFileError, read_dataset, synth_generate, write_dataset
from .evaluation import (ablation_run, aggregate, confusion_csv, curves_csv, evaluate_robust,
                         gamma_sweep, report_json, report_text, run_folds, sweep_csv, _clean_json)
from .features import DEFAULT_BANDS, IDENTITY_BAND, Band, NormStats, RawRecording, preprocess, zscore_apply
from .gradcheck import check_model_gradients
from .model import BuildError, ModelConfig, WeightFileError, build_inc, load_weights, save_weights

log = logging.getLogger("robusteeg")

EXIT_USAGE, EXIT_FILE, EXIT_VALUE, EXIT_CHECK = 2, 3, 4, 1
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be n,c,t integers, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _bands(text: str) -> tuple[Band, ...]:
    if text == "default":
        return DEFAULT_BANDS
    if text == "identity":
        return (IDENTITY_BAND,)
    out = []
    for part in text.split(","):
        try:
            name, edges = part.split(":")
            low, high = (float(v) for v in edges.split("-"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"band must look like name:low-high, got {part!r}")
        out.append(Band(name.strip(), low, high))
    return tuple(out)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _model_config(run: cfgmod.RunConfig, shape) -> ModelConfig:
    n, c, t = shape
    return replace(run.model, n=n, c=c, t=t)


def _load_run(args) -> tuple[cfgmod.RunConfig, object]:
    run = cfgmod.load(args.config, args.set or ())
    if getattr(args, "defense", None):
        run = cfgmod.apply(run, [("train.defense", args.defense)])
    if getattr(args, "out", None):
        run = cfgmod.apply(run, [("run.out", args.out)])
    if getattr(args, "jobs", None):
        run = cfgmod.apply(run, [("run.jobs", str(args.jobs))])
    if getattr(args, "fold", None) is not None:
        run = cfgmod.apply(run, [("run.folds", args.fold)])
    if not run.data.path:
        raise ConfigError("data.path is not set (config file or --set data.path=...)")
    return run, read_dataset(run.data.path)


# commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.subjects < 2:
        raise ValueError(f"need at least two subjects for leave-one-subject-out, got {args.subjects}")
    ds = synth_generate(args.subjects, args.samples, args.dims, num_classes=args.classes,
                        class_sep=args.class_sep, subject_shift=args.subject_shift,
                        robust_fraction=args.robust_fraction, seed=args.seed)
    build_inc(ModelConfig(*args.dims, num_classes=args.classes))  # reject dims the model cannot take
    write_dataset(args.out, ds)
    log.info("wrote %d samples of shape %s to %s", len(ds), ds.sample_shape, args.out)
    return 0


def _read_recording(path: Path) -> RawRecording:
    try:
        with np.load(path) as z:
            return RawRecording(np.asarray(z["data"], dtype=np.float64), float(z["sample_rate"]),
                                int(z["subject_id"]), int(z["label"]))
    except (OSError, KeyError, ValueError) as e:
        raise DatasetFileError(f"cannot read recording {path}: {e}") from None


def cmd_preprocess(args) -> int:
    files = []
    for p in map(Path, args.inputs):
        files += sorted(p.glob("*.npz")) if p.is_dir() else [p]
    if not files:
        raise DatasetFileError("no recordings found")
    recordings = [_read_recording(f) for f in files]
    prefilter = None if args.no_prefilter else (0.5, 70.0)
    ds = preprocess(recordings, args.bands, args.window, args.t, args.hop, prefilter)
    write_dataset(args.out, ds)
    log.info("wrote %d samples of shape %s from %d recordings", len(ds), ds.sample_shape, len(files))
    return 0


def cmd_train(args) -> int:
    run, ds = _load_run(args)
    out = Path(run.run.out)
    folds = run.fold_indices(len(ds.subject_ids))
    _write(out / "config.txt", run.to_text())
    mc = _model_config(run, ds.sample_shape)
    results = run_folds(ds, folds, mc, run.train, jobs=run.run.jobs, keep_model=True,
                        record_val=args.record_val)
    for r in results:
        d = out / f"fold{r.fold.index:02d}"
        d.mkdir(parents=True, exist_ok=True)
        save_weights(r.model, d / "weights.incw")
        r.log.write(d / "log.jsonl")
        np.savez(d / "norm.npz", mean=r.norm.mean, std=r.norm.std)
        _write(d / "report.json", report_json(r.report))
        _write(d / "report.txt", report_text(r.report, f"fold {r.fold.index} (subject {r.fold.test_subject})"))
        _write(d / "curves.csv", curves_csv(r.log))
        _write(d / "confusion.csv", confusion_csv(r.report.confusion))
        log.info("fold %d: acc %.4f r-acc %.4f", r.fold.index, r.report.accuracy, r.report.r_accuracy)
    agg = aggregate(r.report for r in results)
    summary = {"defense": run.train.defense, "folds": [r.fold.index for r in results],
               "mean": agg.mean, "std": agg.std}
    _write(out / "summary.json", json.dumps(_clean_json(summary), indent=2, sort_keys=True) + "\n")
    print(f"{run.train.defense}: accuracy {agg.fmt('accuracy')}  r-accuracy {agg.fmt('r_accuracy')}")
    return 0


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.dataset)
    if args.subjects:
        ds = ds.by_subjects([int(s) for s in args.subjects.split(",")])
        if len(ds) == 0:
            raise ValueError(f"no samples for subjects {args.subjects}")
    if args.norm_stats:
        try:
            with np.load(args.norm_stats) as z:
                stats = NormStats(z["mean"], z["std"])
        except (OSError, KeyError, ValueError) as e:
            raise DatasetFileError(f"cannot read normalization stats {args.norm_stats}: {e}") from None
        ds = zscore_apply(ds, stats)
    n, c, t = ds.sample_shape
    model = build_inc(ModelConfig(n, c, t, num_classes=args.classes, dtype="float32"))
    load_weights(model, args.weights)
    threat = ThreatModel(args.norm, args.eps)
    configs = [("fgsm", AttackConfig("fgsm", random_init=args.random_init))] if args.attack == "fgsm" else \
        [(f"pgd{T}", AttackConfig("pgd", steps=T, step_size=args.step_size if args.step_size is not None
                                  else args.eps / 4, random_init=args.random_init))
         for T in (args.steps or [10])]
    out = Path(args.out)
    for name, ac in configs:
        rep = evaluate_robust(model, ds, threat, ac, seed=args.seed)
        _write(out / f"eval_{name}.json", report_json(rep))
        _write(out / f"eval_{name}.txt", report_text(rep, f"{name} {args.norm} eps={args.eps:g}"))
        _write(out / f"eval_{name}_confusion.csv", confusion_csv(rep.confusion))
        _write(out / f"eval_{name}_r_confusion.csv", confusion_csv(rep.r_confusion))
        print(f"{name}: accuracy {rep.accuracy:.4f}  r-accuracy {rep.r_accuracy:.4f}  "
              f"f1 {rep.macro_f1:.4f}  r-f1 {rep.r_f1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    run, ds = _load_run(args)
    out = Path(run.run.out)
    _write(out / "config.txt", run.to_text())
    folds = run.fold_indices(len(ds.subject_ids))
    points = gamma_sweep(ds, run.train, _model_config(run, ds.sample_shape), args.gammas, folds,
                         jobs=run.run.jobs)
    text = sweep_csv(points)
    _write(out / "sweep.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_ablation(args) -> int:
    run, ds = _load_run(args)
    out = Path(run.run.out)
    _write(out / "config.txt", run.to_text())
    folds = run.fold_indices(len(ds.subject_ids))
    result = ablation_run(ds, run.train, _model_config(run, ds.sample_shape), tuple(args.arms.split(",")),
                          folds, jobs=run.run.jobs)
    table = result.table()
    _write(out / "ablation.txt", table)
    _write(out / "ablation.json", json.dumps(_clean_json(result.to_dict()), indent=2, sort_keys=True) + "\n")
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    n, c, t = args.dims
    model = build_inc(ModelConfig(n, c, t, dtype="float64"), seed=args.seed).eval()
    rng = np.random.default_rng(args.seed)
    for name, buf in model.buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else rng.normal(0, 0.1, buf.shape)
    x = rng.standard_normal((2, n, c, t))
    y = rng.integers(0, model.config.num_classes, 2)
    errors = check_model_gradients(model, x, y, entries_per_param=args.entries, seed=args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:<28}{err:.3e}  {'ok' if err < GRADCHECK_TOL else 'FAIL'}")
    ok = worst < GRADCHECK_TOL
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else EXIT_CHECK


def cmd_params(args) -> int:
    n, c, t = args.dims
    model = build_inc(ModelConfig(n, c, t, num_classes=args.classes))
    for name, p in model.parameters():
        print(f"{name:<28}{str(p.shape):<20}{p.size:>10}")
    print(f"total {model.num_parameters()}")
    print(f"spatial {model.spatial} flatten {model.flatten_size}")
    return 0


# parser --------------------------------------------------------------------------

def _add_run_flags(p, defense=False):
    p.add_argument("--config", help="run configuration file (section.key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help="output directory (run.out)")
    p.add_argument("--jobs", type=int, help="parallel fold workers (run.jobs)")
    if defense:
        p.add_argument("--defense", choices=("none", "at", "tsp"))
    p.add_argument("--fold", help="fold index, comma list or 'all' (run.folds)")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only print results and errors")
    ap = _Parser(prog="robusteeg", description=__doc__.split("\n\n")[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = command("synth", "write a synthetic EEGF dataset")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--samples", type=int, default=200, help="samples per subject")
    p.add_argument("--dims", type=_dims, default=(5, 62, 16), help="n,c,t")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--class-sep", type=float, default=2.0)
    p.add_argument("--subject-shift", type=float, default=0.5)
    p.add_argument("--robust-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = command("preprocess", "raw recordings (.npz) to a DE feature dataset")
    p.add_argument("inputs", nargs="+", help=".npz files or directories of them")
    p.add_argument("--bands", type=_bands, default=DEFAULT_BANDS,
                   help="'default', 'identity' or name:low-high,...")
    p.add_argument("--window", type=float, default=1.0, help="DE window in seconds")
    p.add_argument("--t", type=int, default=16, help="windows per sample")
    p.add_argument("--hop", type=int, default=None, help="windows between samples (default t)")
    p.add_argument("--no-prefilter", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = command("train", "train per fold; writes weights, logs and reports")
    _add_run_flags(p, defense=True)
    p.add_argument("--record-val", action="store_true", help="log held-out metrics every epoch")
    p.set_defaults(fn=cmd_train)

    p = command("evaluate", "clean and robust metrics for saved weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--norm-stats", help="norm.npz written by train (applied before evaluation)")
    p.add_argument("--subjects", help="comma list of subject ids to evaluate on")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--attack", choices=("pgd", "fgsm"), default="pgd")
    p.add_argument("-T", "--steps", type=int, action="append", help="PGD iterations (repeatable)")
    p.add_argument("--step-size", type=float, default=None, help="PGD step (default eps/4)")
    p.add_argument("--no-random-init", dest="random_init", action="store_false")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_evaluate)

    p = command("sweep", "TSP robustness as a function of gamma (CSV)")
    _add_run_flags(p)
    p.add_argument("--gammas", type=_floats, default=[0.0, 0.005, 0.01, 0.03, 0.1])
    p.set_defaults(fn=cmd_sweep)

    p = command("ablation", "TSP vs AT vs no defense on the same folds and seeds")
    _add_run_flags(p)
    p.add_argument("--arms", default="tsp,at,none")
    p.set_defaults(fn=cmd_ablation)

    p = command("gradcheck", "finite-difference check of the full model")
    p.add_argument("--dims", type=_dims, default=(5, 16, 16))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entries", type=int, default=3, help="sampled entries per parameter")
    p.set_defaults(fn=cmd_gradcheck)

    p = command("params", "parameter shapes and count")
    p.add_argument("--dims", type=_dims, default=(5, 62, 16))
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(fn=cmd_params)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    print(f"robusteeg: error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("UsageError", e, EXIT_USAGE)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ConfigError as e:
        return _fail("ConfigError", e, EXIT_USAGE)
    except (DatasetFileError, WeightFileError) as e:
        return _fail(type(e).__name__, e, EXIT_FILE)
    except OSError as e:
        return _fail("FileError", f"{e.filename}: {e.strerror}" if e.filename else e, EXIT_FILE)
    except (BuildError, ValueError) as e:
        return _fail(type(e).__name__, e, EXIT_VALUE)


if __name__ == "__main__":
    sys.exit(main())
