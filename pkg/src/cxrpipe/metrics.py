"""Evaluation metrics: pixel-overlap scores for segmentation, one-vs-rest
classification metrics with binomial confidence intervals, sample-weighted
overall values, ROC/AUC, and cross-fold confusion accumulation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

Z_95 = 1.96

CLASS_METRIC_NAMES = ("accuracy", "precision", "sensitivity", "f1", "specificity")


# ----------------------------------------------------------------- confusion

@dataclass
class PixelConfusion:
    """Foreground/background pixel counts; foreground (lung) is positive."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_masks(cls, pred: np.ndarray, truth: np.ndarray) -> "PixelConfusion":
        pred = np.asarray(pred) > 0
        truth = np.asarray(truth) > 0
        if pred.shape != truth.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
        return cls(tp=int(np.sum(pred & truth)), tn=int(np.sum(~pred & ~truth)),
                   fp=int(np.sum(pred & ~truth)), fn=int(np.sum(~pred & truth)))

    def add(self, other: "PixelConfusion"):
        self.tp += other.tp
        self.tn += other.tn
        self.fp += other.fp
        self.fn += other.fn

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def seg_metrics(pc: PixelConfusion) -> dict:
    """Pixel accuracy, intersection-over-union and Dice coefficient."""
    if pc.total == 0:
        raise ValueError("no pixels evaluated")
    union = pc.tp + pc.fp + pc.fn
    if union == 0:
        iou = dsc = 1.0  # both masks empty: perfect agreement by convention
    else:
        iou = pc.tp / union
        dsc = 2.0 * pc.tp / (2.0 * pc.tp + pc.fp + pc.fn)
    return {"accuracy": (pc.tp + pc.tn) / pc.total, "iou": iou, "dsc": dsc}


class ConfusionMatrix:
    """Class-by-class counts; rows are true labels, columns predictions."""

    def __init__(self, n_classes: int, counts=None):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.n_classes = n_classes
        if counts is None:
            self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (n_classes, n_classes):
                raise ValueError(f"counts shape {counts.shape} != ({n_classes}, {n_classes})")
            if np.any(counts < 0):
                raise ValueError("counts must be non-negative")
            self.counts = counts.copy()

    def add(self, true_label: int, pred_label: int, n: int = 1):
        self.counts[true_label, pred_label] += n

    def add_batch(self, true_labels, pred_labels):
        for t, p in zip(np.asarray(true_labels), np.asarray(pred_labels)):
            self.counts[int(t), int(p)] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_counts(self) -> np.ndarray:
        """True-sample count per class (row sums)."""
        return self.counts.sum(axis=1)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate_folds(fold_cms) -> ConfusionMatrix:
    """Elementwise sum of per-fold confusion matrices."""
    fold_cms = list(fold_cms)
    if not fold_cms:
        raise ValueError("no confusion matrices to accumulate")
    n = fold_cms[0].n_classes
    if any(cm.n_classes != n for cm in fold_cms):
        raise ValueError("confusion matrices have differing class counts")
    out = ConfusionMatrix(n)
    for cm in fold_cms:
        out.counts += cm.counts
    return out


# ------------------------------------------------------------- class metrics

@dataclass(frozen=True)
class MetricValue:
    value: float
    degenerate: bool = False  # true when the defining ratio was 0/0


def _ratio(num: float, den: float) -> MetricValue:
    if den == 0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(num / den)


def class_metrics(cm: ConfusionMatrix, class_i: int) -> dict:
    """One-vs-rest accuracy, precision, sensitivity, f1 and specificity for
    one class. 0/0 ratios come back as 0 with the degenerate flag set."""
    if not 0 <= class_i < cm.n_classes:
        raise ValueError(f"class index {class_i} out of range")
    c = cm.counts
    tp = int(c[class_i, class_i])
    fn = int(c[class_i].sum()) - tp
    fp = int(c[:, class_i].sum()) - tp
    tn = cm.total - tp - fn - fp
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    f1_num = 2.0 * precision.value * sensitivity.value
    f1_den = precision.value + sensitivity.value
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "precision": precision,
        "sensitivity": sensitivity,
        "f1": MetricValue(f1_num / f1_den) if f1_den > 0 else MetricValue(0.0, degenerate=True),
        "specificity": _ratio(tn, tn + fp),
    }


def weighted_overall(per_class_values, weights) -> float:
    """Sample-count-weighted average of per-class metric values."""
    values = [float(v) for v in per_class_values]
    weights = [float(w) for w in weights]
    if len(values) != len(weights):
        raise ValueError("values and weights must have equal length")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    return sum(w * v for w, v in zip(weights, values)) / sum(weights)


def confidence_interval(value: float, n: int, z: float = Z_95) -> float:
    """Binomial half-width z * sqrt(value * (1 - value) / n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"metric value {value} outside [0, 1]")
    return z * math.sqrt(value * (1.0 - value) / n)


@dataclass(frozen=True)
class MetricWithCI:
    value: float
    half_width: float
    n: int
    z: float = Z_95
    degenerate: bool = False


@dataclass
class MetricsReport:
    """Per-class and weighted-overall metrics with confidence intervals."""

    class_names: list
    per_class: dict = field(default_factory=dict)   # name -> {metric: MetricWithCI}
    overall: dict = field(default_factory=dict)     # metric -> MetricWithCI
    weights: list = field(default_factory=list)     # true-sample count per class
    confusion: ConfusionMatrix | None = None


def build_report(cm: ConfusionMatrix, class_names, z: float = Z_95) -> MetricsReport:
    """Full report from an accumulated confusion matrix. The per-class CI
    uses that class's accumulated test-sample count; the overall row is the
    weight-recombined per-class value with the total count."""
    class_names = list(class_names)
    if len(class_names) != cm.n_classes:
        raise ValueError("class name count != confusion matrix classes")
    weights = cm.class_counts()
    report = MetricsReport(class_names=class_names, weights=[int(w) for w in weights],
                           confusion=cm)
    per_class_values: dict[str, list] = {m: [] for m in CLASS_METRIC_NAMES}
    for i, name in enumerate(class_names):
        raw = class_metrics(cm, i)
        n_i = max(int(weights[i]), 1)
        report.per_class[name] = {
            m: MetricWithCI(value=raw[m].value,
                            half_width=confidence_interval(raw[m].value, n_i, z),
                            n=n_i, z=z, degenerate=raw[m].degenerate)
            for m in CLASS_METRIC_NAMES
        }
        for m in CLASS_METRIC_NAMES:
            per_class_values[m].append(raw[m].value)
    n_total = max(cm.total, 1)
    for m in CLASS_METRIC_NAMES:
        value = weighted_overall(per_class_values[m], [max(int(w), 0) for w in weights]) \
            if weights.sum() > 0 else 0.0
        report.overall[m] = MetricWithCI(value=value,
                                         half_width=confidence_interval(value, n_total, z),
                                         n=n_total, z=z)
    return report


# ------------------------------------------------------------------- ROC/AUC

@dataclass
class RocResult:
    points: list            # (fpr, tpr, threshold), high to low threshold
    auc: float
    degenerate: bool = False  # single-class labels: AUC undefined


def _roc_binary(positive: np.ndarray, scores: np.ndarray) -> RocResult:
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return RocResult(points=[], auc=float("nan"), degenerate=True)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = positive[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        points.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j
    auc = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocResult(points=points, auc=auc)


def roc_curve(scores: np.ndarray, labels: np.ndarray, class_i: int) -> RocResult:
    """One-vs-rest ROC for one class from per-sample probability rows.
    Ties share a threshold, which makes the trapezoid AUC equal the mid-rank
    pair-counting probability."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError("scores must be (n_samples, n_classes) aligned with labels")
    return _roc_binary(labels == class_i, scores[:, class_i])


def roc_micro_average(scores: np.ndarray, labels: np.ndarray) -> RocResult:
    """Micro-average ROC: every (sample, class) pair pooled one-vs-rest."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = scores.shape
    onehot = np.zeros((n, c), dtype=bool)
    onehot[np.arange(n), labels.astype(int)] = True
    return _roc_binary(onehot.ravel(), scores.ravel())


# ----------------------------------------------------------------- CSV output

def write_metrics_csv(report: MetricsReport, path):
    """One row per (class|overall) x metric: value, half_width, n."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scope", "metric", "value", "half_width", "n", "degenerate"])
        for name in report.class_names:
            for m in CLASS_METRIC_NAMES:
                mc = report.per_class[name][m]
                wr.writerow([name, m, repr(mc.value), repr(mc.half_width), mc.n,
                             int(mc.degenerate)])
        for m in CLASS_METRIC_NAMES:
            mc = report.overall[m]
            wr.writerow(["overall", m, repr(mc.value), repr(mc.half_width), mc.n,
                         int(mc.degenerate)])


def write_confusion_csv(cm: ConfusionMatrix, path, class_names=None):
    names = list(class_names) if class_names else [f"class{i}" for i in range(cm.n_classes)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["true\\pred"] + names)
        for i, name in enumerate(names):
            wr.writerow([name] + [int(v) for v in cm.counts[i]])


def write_roc_csv(roc: RocResult, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in roc.points:
            wr.writerow([repr(fpr), repr(tpr), repr(thr)])
