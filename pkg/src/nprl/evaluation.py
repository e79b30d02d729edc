"""Metrics and the cross-validation protocol.

AUROC is the Mann-Whitney statistic computed by sort-and-rank with midranks
for ties. Confusion counts threshold the positive-class probability at 0.5 by
default. Cross-validation fits scaling on the training folds only, resamples
per arm, trains, scores the untouched test fold, and aggregates both by
summing counts (with a pooled-score ROC) and by per-fold mean and standard
deviation.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import pipeline as P
from . import train as T
from .errors import InputError, LeakageError, UndefinedMetricError
from .model import FeatureSchema, ModelConfig
from .util import derive_seed

ARMS = ("baseline", "nprl", "class_balanced", "class_balanced_undersampled")

ScorePair = tuple[float, int]


def auroc(scores: list[ScorePair]) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted half; computed in O(m log m) via midranks."""
    values = np.array([s for s, _ in scores], dtype=np.float64)
    labels = np.array([y for _, y in scores], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int
    sensitivity: float | None
    specificity: float | None


def confusion(scores: list[ScorePair], threshold: float = 0.5) -> ConfusionCounts:
    """Predict positive iff score >= threshold; rates are None when undefined."""
    tp = tn = fp = fn = 0
    for score, label in scores:
        predicted = score >= threshold
        if label == 1:
            tp, fn = (tp + 1, fn) if predicted else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if predicted else (fp, tn + 1)
    sensitivity = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    return ConfusionCounts(tp, tn, fp, fn, sensitivity, specificity)


@dataclass
class FoldReport:
    fold_id: int
    scores: list[ScorePair]
    tp: int
    tn: int
    fp: int
    fn: int
    auroc: float
    sensitivity: float | None
    specificity: float | None

    @classmethod
    def from_scores(cls, fold_id: int, scores: list[ScorePair], threshold: float) -> "FoldReport":
        counts = confusion(scores, threshold)
        return cls(
            fold_id=fold_id,
            scores=scores,
            tp=counts.tp,
            tn=counts.tn,
            fp=counts.fp,
            fn=counts.fn,
            auroc=auroc(scores),
            sensitivity=counts.sensitivity,
            specificity=counts.specificity,
        )


@dataclass
class AggregateReport:
    folds: list[FoldReport]
    tp: int
    tn: int
    fp: int
    fn: int
    pooled_auroc: float
    pooled_sensitivity: float | None
    pooled_specificity: float | None
    metric_means: dict[str, float]
    metric_stds: dict[str, float]


def aggregate(folds: list[FoldReport], threshold: float = 0.5) -> AggregateReport:
    pooled: list[ScorePair] = []
    for f in folds:
        pooled.extend(f.scores)
    counts = confusion(pooled, threshold)
    per_metric = {
        "auroc": [f.auroc for f in folds],
        "sensitivity": [f.sensitivity for f in folds if f.sensitivity is not None],
        "specificity": [f.specificity for f in folds if f.specificity is not None],
    }
    means = {k: float(np.mean(v)) for k, v in per_metric.items() if v}
    stds = {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for k, v in per_metric.items() if v}
    report = AggregateReport(
        folds=folds,
        tp=counts.tp,
        tn=counts.tn,
        fp=counts.fp,
        fn=counts.fn,
        pooled_auroc=auroc(pooled),
        pooled_sensitivity=counts.sensitivity,
        pooled_specificity=counts.specificity,
        metric_means=means,
        metric_stds=stds,
    )
    assert report.tp == sum(f.tp for f in folds)
    assert report.tn == sum(f.tn for f in folds)
    return report


# ---------------------------------------------------------------------------
# Cross-validation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmConfigs:
    """Everything one arm needs; seeds inside are overridden per fold."""

    model: ModelConfig
    pretrain: T.PretrainConfig = T.PretrainConfig()
    finetune: T.FinetuneConfig = T.FinetuneConfig()
    baseline: T.BaselineConfig = T.BaselineConfig()
    resample_target: int = 2600
    threshold: float = 0.5
    weight_scheme: str = "inverse_frequency"
    effective_beta: float = 0.999


def _fit_arm(
    arm: str,
    train_set: list[P.NightInstance],
    schema: FeatureSchema,
    cfg: ArmConfigs,
    seed: int,
):
    """Train one arm on one fold's (already scaled) training instances."""
    if arm == "baseline":
        data = P.resample_training(train_set, cfg.resample_target, derive_seed(seed, "resample"))
        params, _ = T.train_baseline(
            data, cfg.model, schema, replace(cfg.baseline, seed=derive_seed(seed, "train"))
        )
    elif arm == "nprl":
        profiles = T.strip_labels(train_set)
        theta0, _ = T.nprl_pretrain(
            profiles, cfg.model, schema, replace(cfg.pretrain, seed=derive_seed(seed, "pretrain"))
        )
        theta0 = M.replace_head(theta0, cfg.model.head_classes, derive_seed(seed, "head"))
        data = train_set
        if cfg.finetune.resample:
            data = P.resample_training(train_set, cfg.resample_target, derive_seed(seed, "resample"))
        params, _ = T.finetune(
            data, theta0, replace(cfg.finetune, seed=derive_seed(seed, "train")), cfg.model, schema
        )
    elif arm == "class_balanced":
        weights = T.class_balanced_weights(
            P.ClassStats.from_instances(train_set), cfg.weight_scheme, cfg.effective_beta
        )
        params, _ = T.train_baseline(
            train_set,
            cfg.model,
            schema,
            replace(cfg.baseline, seed=derive_seed(seed, "train")),
            class_weights=weights,
        )
    elif arm == "class_balanced_undersampled":
        data = P.undersample_negatives(
            train_set, cfg.resample_target, derive_seed(seed, "resample")
        )
        weights = T.class_balanced_weights(
            P.ClassStats.from_instances(data), cfg.weight_scheme, cfg.effective_beta
        )
        params, _ = T.train_baseline(
            data,
            cfg.model,
            schema,
            replace(cfg.baseline, seed=derive_seed(seed, "train")),
            class_weights=weights,
        )
    else:
        raise InputError(f"unknown arm {arm!r}, expected one of {ARMS}")
    return params


def _run_fold(args) -> FoldReport:
    instances, schema, split, arm, cfg, seed, fold = args
    train_set = [i for i in instances if split.fold_of[i.instance_index] != fold]
    test_set = [i for i in instances if split.fold_of[i.instance_index] == fold]
    train_ids = {i.instance_index for i in train_set}
    test_ids = {i.instance_index for i in test_set}
    if train_ids & test_ids:
        raise LeakageError(f"fold {fold}: train/test share instances {sorted(train_ids & test_ids)[:5]}")
    if len(train_ids) != len(train_set) or len(test_ids) != len(test_set):
        # duplicated indices defeat the fold accounting entirely
        raise LeakageError(f"fold {fold}: duplicate instance indices in the dataset")
    scaling = P.fit_minmax(train_set)
    train_scaled = P.apply_minmax(train_set, scaling)
    test_scaled = P.apply_minmax(test_set, scaling)
    fold_seed = derive_seed(seed, arm, "fold", fold)
    params = _fit_arm(arm, train_scaled, schema, cfg, fold_seed)
    temporal, statics = T.to_arrays(test_scaled)
    probs = M.predict_proba(temporal, statics, params, cfg.model)[:, 1]
    scores = [(float(p), int(inst.label)) for p, inst in zip(probs, test_scaled)]
    return FoldReport.from_scores(fold, scores, cfg.threshold)


def cross_validate(
    instances: list[P.NightInstance],
    schema: FeatureSchema,
    split: P.DatasetSplit,
    arm: str,
    configs: ArmConfigs,
    seed: int,
    n_workers: int = 1,
) -> AggregateReport:
    """Train and score one arm across every fold of the split."""
    missing = [i.instance_index for i in instances if i.instance_index not in split.fold_of]
    if missing:
        raise InputError(f"split does not cover instances {missing[:5]}")
    jobs = [(instances, schema, split, arm, configs, seed, fold) for fold in range(split.k)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            folds = list(pool.map(_run_fold, jobs))
    else:
        folds = [_run_fold(job) for job in jobs]
    return aggregate(folds, configs.threshold)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = (
    "arm",
    "fold_id",
    "n",
    "n_pos",
    "n_neg",
    "tp",
    "tn",
    "fp",
    "fn",
    "auroc",
    "sensitivity",
    "specificity",
)


def _metric_str(value: float | None) -> str:
    return "NA" if value is None else repr(float(value))


def _report_rows(arm: str, report: AggregateReport) -> list[list[str]]:
    rows = []
    for f in report.folds:
        rows.append(
            [
                arm,
                str(f.fold_id),
                str(len(f.scores)),
                str(f.tp + f.fn),
                str(f.tn + f.fp),
                str(f.tp),
                str(f.tn),
                str(f.fp),
                str(f.fn),
                repr(f.auroc),
                _metric_str(f.sensitivity),
                _metric_str(f.specificity),
            ]
        )
    total = sum(len(f.scores) for f in report.folds)
    rows.append(
        [
            arm,
            "ALL",
            str(total),
            str(report.tp + report.fn),
            str(report.tn + report.fp),
            str(report.tp),
            str(report.tn),
            str(report.fp),
            str(report.fn),
            repr(report.pooled_auroc),
            _metric_str(report.pooled_sensitivity),
            _metric_str(report.pooled_specificity),
        ]
    )
    return rows


def roc_points(scores: list[ScorePair]) -> list[tuple[float, float]]:
    """ROC polyline from pooled scores, from (0, 0) to (1, 1)."""
    values = np.array([s for s, _ in scores])
    labels = np.array([y for _, y in scores])
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes")
    order = np.argsort(-values, kind="mergesort")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        score = values[order[i]]
        while j < len(order) and values[order[j]] == score:
            if labels[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def emit_report(
    report: AggregateReport,
    csv_path,
    roc_path,
    arm: str = "model",
    header_comment: str | None = None,
) -> None:
    """One CSV row per fold plus an ALL row, and a pooled fpr/tpr point list."""
    emit_combined_report({arm: report}, csv_path, roc_path, header_comment)


def emit_combined_report(
    reports: dict[str, AggregateReport], csv_path, roc_path, header_comment: str | None = None
) -> None:
    with open(csv_path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for arm, report in reports.items():
            for row in _report_rows(arm, report):
                writer.writerow(row)
    with open(roc_path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        for arm, report in reports.items():
            fh.write(f"# arm={arm}\n")
            pooled: list[ScorePair] = []
            for f in report.folds:
                pooled.extend(f.scores)
            for fpr, tpr in roc_points(pooled):
                fh.write(f"{fpr!r} {tpr!r}\n")


def read_report(csv_path) -> dict[str, dict[str, dict[str, str]]]:
    """Parse report.csv into {arm: {fold_id: {column: value}}}."""
    out: dict[str, dict[str, dict[str, str]]] = {}
    with open(csv_path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header = rows[0]
    for row in rows[1:]:
        record = dict(zip(header, row))
        out.setdefault(record["arm"], {})[record["fold_id"]] = record
    return out
