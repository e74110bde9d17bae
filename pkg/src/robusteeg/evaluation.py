"""Leave-one-subject-out evaluation, clean/robust metrics, ablations and the
weight-perturbation (gamma) sweep."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .attacks import AttackConfig, ThreatModel, attack
from .datasets import Dataset
from .features import NormStats, zscore_apply, zscore_fit
from .model import ModelConfig, build_inc
from .rng import derive_seed, stream
from .training import TrainConfig, TrainingLog, fit


@dataclass(frozen=True)
class FoldSpec:
    index: int
    test_subject: int
    train_subjects: tuple[int, ...]


def loso_split(dataset: Dataset) -> list[FoldSpec]:
    subjects = dataset.subject_ids
    if len(subjects) < 2:
        raise ValueError(f"LOSO needs at least two subjects, found {len(subjects)}")
    return [FoldSpec(i, s, tuple(o for o in subjects if o != s)) for i, s in enumerate(subjects)]


# metrics ---------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * num_classes + y_pred,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_scores(confusion: np.ndarray) -> dict[str, list[float]]:
    """Precision, recall and F1 per class; 0 wherever a denominator is 0."""
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {"precision": precision.tolist(), "recall": recall.tolist(), "f1": f1.tolist()}


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray
    per_class: dict
    loss: float = float("nan")
    r_accuracy: float | None = None
    r_f1: float | None = None
    r_confusion: np.ndarray | None = None
    r_per_class: dict | None = None
    r_loss: float | None = None

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        if self.r_confusion is not None:
            d["r_confusion"] = self.r_confusion.tolist()
        return d


def scores_from_predictions(y_true, y_pred, num_classes: int):
    cm = confusion_matrix(y_true, y_pred, num_classes)
    pc = per_class_scores(cm)
    return float(np.trace(cm) / cm.sum()), float(np.mean(pc["f1"])), cm, pc


def predict(model, X, batch_size: int = 256) -> np.ndarray:
    """Logits for X in batches; the model must be in eval mode."""
    out = []
    for start in range(0, len(X), batch_size):
        out.append(model(X[start:start + batch_size], track_params=False).data)
    return np.concatenate(out)


def _mean_loss(logits: np.ndarray, labels) -> float:
    return float(F.softmax_cross_entropy(logits.astype(np.float64), labels).data)


def evaluate(model, samples: Dataset, num_classes: int | None = None,
             batch_size: int = 256) -> MetricsReport:
    """Clean accuracy, macro-F1 and confusion. Ties in argmax go to the lowest class."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    model.eval()
    logits = predict(model, samples.X, batch_size)
    k = num_classes or logits.shape[1]
    acc, f1, cm, pc = scores_from_predictions(samples.labels, logits.argmax(axis=1), k)
    return MetricsReport(acc, f1, cm, pc, loss=_mean_loss(logits, samples.labels))


def evaluate_robust(model, samples: Dataset, threat: ThreatModel, config: AttackConfig,
                    seed: int = 0, batch_size: int = 256) -> MetricsReport:
    """Clean and adversarial metrics from one pass. Batch b is attacked with
    the stream (seed, "attack", b)."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    model.eval()
    clean, adv = [], []
    for b, start in enumerate(range(0, len(samples), batch_size)):
        xb = samples.X[start:start + batch_size]
        yb = samples.labels[start:start + batch_size]
        clean.append(model(xb, track_params=False).data)
        x_adv = attack(model, xb, yb, threat, config, stream(seed, "attack", b))
        adv.append(model(x_adv, track_params=False).data)
    clean, adv = np.concatenate(clean), np.concatenate(adv)
    k = clean.shape[1]
    acc, f1, cm, pc = scores_from_predictions(samples.labels, clean.argmax(axis=1), k)
    racc, rf1, rcm, rpc = scores_from_predictions(samples.labels, adv.argmax(axis=1), k)
    return MetricsReport(acc, f1, cm, pc, loss=_mean_loss(clean, samples.labels),
                         r_accuracy=racc, r_f1=rf1, r_confusion=rcm, r_per_class=rpc,
                         r_loss=_mean_loss(adv, samples.labels))


METRICS = ("accuracy", "macro_f1", "r_accuracy", "r_f1")


@dataclass
class AggregateReport:
    mean: dict
    std: dict
    count: int

    def fmt(self, metric: str) -> str:
        if self.mean.get(metric) is None:
            return "n/a"
        return f"{self.mean[metric]:.2f} ± {self.std[metric]:.2f}"


def aggregate(reports) -> AggregateReport:
    """Mean and population standard deviation of each metric across reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    mean, std = {}, {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports]
        if any(v is None for v in vals):
            mean[m] = std[m] = None
            continue
        mean[m] = float(np.mean(vals))
        std[m] = float(np.std(vals))
    return AggregateReport(mean, std, len(reports))


# fold runs ---------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: FoldSpec
    report: MetricsReport
    log: TrainingLog
    model: object = field(repr=False, default=None)
    norm: NormStats | None = field(repr=False, default=None)


def fold_seed(seed: int, fold: FoldSpec) -> int:
    return derive_seed(seed, "fold", fold.index)


def run_fold(dataset: Dataset, fold: FoldSpec, model_config: ModelConfig, train_config: TrainConfig,
             keep_model: bool = False, record_val: bool = False, probe=None) -> FoldResult:
    """Normalize with training-subject statistics, train, and score the
    held-out subject under the evaluation attack."""
    train = dataset.by_subjects(fold.train_subjects)
    test = dataset.by_subjects([fold.test_subject])
    stats = zscore_fit(train)
    train, test = zscore_apply(train, stats), zscore_apply(test, stats)
    seed = fold_seed(train_config.seed, fold)
    model = build_inc(model_config, seed=derive_seed(seed, "init"))
    log = fit(model, train, test if record_val else None, replace(train_config, seed=seed), probe=probe)
    report = evaluate_robust(model, test, train_config.threat, train_config.eval_attack,
                             seed=derive_seed(seed, "eval_attack"))
    return FoldResult(fold, report, log, model if keep_model else None, stats)


def _select_folds(dataset, folds):
    all_folds = loso_split(dataset)
    if folds is None:
        return all_folds
    return [all_folds[i] for i in folds]


def _run_job(args) -> FoldResult:
    return run_fold(*args)


def run_folds(dataset: Dataset, folds, model_config: ModelConfig, train_config: TrainConfig,
              jobs: int = 1, record_val: bool = False, probe=None,
              keep_model: bool = False) -> list[FoldResult]:
    """run_fold over ``folds`` (indices, or None for all). With ``jobs`` > 1
    folds run in worker processes; each fold is seeded on its own, so the
    results do not depend on ``jobs``."""
    specs = _select_folds(dataset, folds)
    args = [(dataset, f, model_config, train_config, keep_model, record_val) for f in specs]
    if jobs <= 1 or len(specs) <= 1 or probe is not None:
        return [run_fold(*a, probe=probe) for a in args]
    with ProcessPoolExecutor(max_workers=min(jobs, len(specs))) as pool:
        return list(pool.map(_run_job, args))


@dataclass
class ArmResult:
    name: str
    folds: list
    aggregate: AggregateReport


@dataclass
class AblationResult:
    arms: dict  # name -> ArmResult

    def table(self) -> str:
        lines = [f"{'Defense':<16}{'R-Accuracy':>14}{'Accuracy':>14}{'R-F1':>14}{'F1':>14}"]
        for name, arm in self.arms.items():
            a = arm.aggregate
            lines.append(f"{ARM_LABELS.get(name, name):<16}{a.fmt('r_accuracy'):>14}{a.fmt('accuracy'):>14}"
                         f"{a.fmt('r_f1'):>14}{a.fmt('macro_f1'):>14}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {name: {"mean": arm.aggregate.mean, "std": arm.aggregate.std,
                       "folds": [{"test_subject": f.fold.test_subject, **f.report.to_dict()}
                                 for f in arm.folds]}
                for name, arm in self.arms.items()}


ARM_LABELS = {"none": "Without defense", "at": "AT", "tsp": "TSP"}


def ablation_run(dataset: Dataset, train_config: TrainConfig, model_config: ModelConfig,
                 arms=("tsp", "at", "none"), folds=None, record_val: bool = False,
                 probe=None, jobs: int = 1) -> AblationResult:
    """Train every arm on every selected fold with identical seeds, data
    order and initialization; only the defense differs."""
    results = {}
    for arm in arms:
        cfg = replace(train_config, defense=arm)
        runs = run_folds(dataset, folds, model_config, cfg, jobs, record_val,
                         probe if arm == "tsp" else None)
        results[arm] = ArmResult(ARM_LABELS.get(arm, arm), runs, aggregate(r.report for r in runs))
    return AblationResult(results)


DEFAULT_GAMMAS = (0.0, 0.005, 0.01, 0.03, 0.1)


def gamma_sweep(dataset: Dataset, train_config: TrainConfig, model_config: ModelConfig,
                gammas=DEFAULT_GAMMAS, folds=None,
                jobs: int = 1) -> list[tuple[float, AggregateReport, list]]:
    """One TSP run per gamma per fold; returns (gamma, aggregate, fold results)."""
    out = []
    for g in gammas:
        if g < 0:
            raise ValueError(f"gamma must be non-negative, got {g}")
        cfg = replace(train_config, defense="tsp", tsp=replace(train_config.tsp, gamma=g))
        runs = run_folds(dataset, folds, model_config, cfg, jobs)
        out.append((g, aggregate(r.report for r in runs), runs))
    return out


# report writers ------------------------------------------------------------------

def _clean_json(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def report_json(report: MetricsReport) -> str:
    return json.dumps(_clean_json(report.to_dict()), indent=2, sort_keys=True) + "\n"


def report_text(report: MetricsReport, title: str = "") -> str:
    rows = [("Accuracy", report.accuracy), ("F1-score", report.macro_f1),
            ("R-Accuracy", report.r_accuracy), ("R-F1-score", report.r_f1)]
    lines = [title] if title else []
    lines += [f"{name:<12}{'n/a' if v is None else f'{v:.4f}':>10}" for name, v in rows]
    return "\n".join(lines) + "\n"


def confusion_csv(confusion: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = confusion.shape[0]
    w.writerow(["true\\pred"] + [str(j) for j in range(k)])
    for i in range(k):
        w.writerow([str(i)] + [str(int(v)) for v in confusion[i]])
    return buf.getvalue()


def curves_csv(log: TrainingLog) -> str:
    keys = ["epoch", "train_loss", "train_acc", "train_racc", "val_loss", "val_acc", "val_racc"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in log.records:
        w.writerow(["" if r[k] is None else r[k] for k in keys])
    return buf.getvalue()


def sweep_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "r_accuracy_mean", "r_accuracy_std", "accuracy_mean", "accuracy_std"])
    for g, agg, _ in points:
        w.writerow([g, agg.mean["r_accuracy"], agg.std["r_accuracy"],
                    agg.mean["accuracy"], agg.std["accuracy"]])
    return buf.getvalue()
