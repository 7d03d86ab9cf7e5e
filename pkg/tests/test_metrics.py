from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrpipe import metrics as M


def brute_force_class_metrics(counts, class_i):
    """Oracle: expand the confusion matrix into individual samples and count
    outcomes one by one with exact rational arithmetic."""
    samples = []
    n = len(counts)
    for t in range(n):
        for p in range(n):
            samples.extend([(t, p)] * int(counts[t][p]))
    tp = sum(1 for t, p in samples if t == class_i and p == class_i)
    fn = sum(1 for t, p in samples if t == class_i and p != class_i)
    fp = sum(1 for t, p in samples if t != class_i and p == class_i)
    tn = sum(1 for t, p in samples if t != class_i and p != class_i)

    def ratio(a, b):
        return Fraction(a, b) if b else Fraction(0)

    precision = ratio(tp, tp + fp)
    sensitivity = ratio(tp, tp + fn)
    f1 = ratio(2 * precision * sensitivity, precision + sensitivity) \
        if precision + sensitivity else Fraction(0)
    return {"accuracy": ratio(tp + tn, len(samples)), "precision": precision,
            "sensitivity": sensitivity, "f1": f1, "specificity": ratio(tn, tn + fp)}


# -------------------------------------------------------------- seg metrics

def test_seg_metrics_perfect_prediction(rng):
    mask = (rng.random((8, 8)) > 0.5).astype(np.uint8) * 255
    pc = M.PixelConfusion.from_masks(mask, mask)
    out = M.seg_metrics(pc)
    assert out["iou"] == 1.0 and out["dsc"] == 1.0 and out["accuracy"] == 1.0


def test_seg_metrics_half_overlap_example():
    truth = np.full((2, 2), 255, dtype=np.uint8)
    pred = np.zeros((2, 2), dtype=np.uint8)
    pred[:, 0] = 255
    pc = M.PixelConfusion.from_masks(pred, truth)
    assert (pc.tp, pc.fn, pc.fp) == (2, 2, 0)
    out = M.seg_metrics(pc)
    assert out["iou"] == 0.5
    assert np.isclose(out["dsc"], 2.0 / 3.0)


def test_seg_metrics_disjoint_and_empty():
    a = np.zeros((2, 2), dtype=np.uint8)
    b = np.zeros((2, 2), dtype=np.uint8)
    a[0, 0] = 255
    b[1, 1] = 255
    out = M.seg_metrics(M.PixelConfusion.from_masks(a, b))
    assert out["iou"] == 0.0 and out["dsc"] == 0.0
    empty = M.seg_metrics(M.PixelConfusion.from_masks(np.zeros((2, 2)), np.zeros((2, 2))))
    assert empty["iou"] == 1.0 and empty["dsc"] == 1.0  # empty-union convention
    with pytest.raises(ValueError):
        M.seg_metrics(M.PixelConfusion())


# ------------------------------------------------------------ class metrics

def test_class_metrics_worked_example():
    cm = M.ConfusionMatrix(3, [[5, 1, 0], [1, 3, 1], [0, 0, 4]])
    out = M.class_metrics(cm, 0)
    assert np.isclose(out["sensitivity"].value, 5 / 6)
    assert np.isclose(out["precision"].value, 5 / 6)
    assert np.isclose(out["specificity"].value, 8 / 9)
    assert np.isclose(out["accuracy"].value, 13 / 15)
    assert np.isclose(out["f1"].value, 5 / 6)


def test_class_metrics_diagonal_is_perfect():
    cm = M.ConfusionMatrix(3, np.diag([4, 5, 6]))
    for i in range(3):
        out = M.class_metrics(cm, i)
        assert all(v.value == 1.0 and not v.degenerate for v in out.values())


def test_class_metrics_zero_support_degenerate():
    cm = M.ConfusionMatrix(3, [[0, 0, 0], [0, 3, 0], [0, 0, 2]])
    out = M.class_metrics(cm, 0)
    assert out["sensitivity"].value == 0.0 and out["sensitivity"].degenerate
    assert out["f1"].degenerate
    with pytest.raises(ValueError):
        M.class_metrics(cm, 3)


@given(st.lists(st.integers(0, 50), min_size=9, max_size=9))
@settings(max_examples=120, deadline=None)
def test_class_metrics_match_brute_force_oracle(flat):
    counts = [flat[0:3], flat[3:6], flat[6:9]]
    if sum(flat) == 0:
        return
    cm = M.ConfusionMatrix(3, counts)
    for i in range(3):
        got = M.class_metrics(cm, i)
        want = brute_force_class_metrics(counts, i)
        for name in M.CLASS_METRIC_NAMES:
            assert abs(got[name].value - float(want[name])) < 1e-12


# -------------------------------------------------------- weighted / CI

def test_weighted_overall_reproduces_reported_value():
    out = M.weighted_overall((0.9953, 0.9310, 0.9704), (423, 144, 134))
    assert abs(out - 0.9773) < 1e-4


def test_weighted_overall_special_cases():
    assert np.isclose(M.weighted_overall((0.2, 0.4, 0.6), (1, 1, 1)), 0.4)
    assert M.weighted_overall((0.2, 0.4, 0.9), (0, 0, 5)) == 0.9
    with pytest.raises(ValueError):
        M.weighted_overall((0.5,), (1, 2))
    with pytest.raises(ValueError):
        M.weighted_overall((0.5, 0.5), (0, 0))


def test_confidence_interval_reproduces_reported_margins():
    assert abs(M.confidence_interval(0.9953, 423) - 0.0065) < 1e-4
    assert abs(M.confidence_interval(0.9773, 701) - 0.0110) < 1e-4


def test_confidence_interval_endpoints():
    assert M.confidence_interval(1.0, 50) == 0.0
    assert M.confidence_interval(0.0, 50) == 0.0
    half = M.confidence_interval(0.5, 100)
    for v in (0.1, 0.3, 0.7, 0.9):
        assert M.confidence_interval(v, 100) < half  # 0.5 maximizes the width
    with pytest.raises(ValueError):
        M.confidence_interval(0.5, 0)
    with pytest.raises(ValueError):
        M.confidence_interval(1.5, 10)


# ------------------------------------------------------- fold accumulation

def test_accumulate_folds_sums_counts(rng):
    cms = [M.ConfusionMatrix(3, rng.integers(0, 10, (3, 3))) for _ in range(5)]
    total = M.accumulate_folds(cms)
    assert np.array_equal(total.counts, sum(cm.counts for cm in cms))
    # order invariance
    assert M.accumulate_folds(reversed(cms)) == total
    # five identical matrices -> 5x counts
    five = M.accumulate_folds([cms[0]] * 5)
    assert np.array_equal(five.counts, 5 * cms[0].counts)


def test_accumulate_folds_dimension_mismatch():
    with pytest.raises(ValueError):
        M.accumulate_folds([M.ConfusionMatrix(3), M.ConfusionMatrix(4)])
    with pytest.raises(ValueError):
        M.accumulate_folds([])


def test_class_metrics_commute_with_accumulation(rng):
    cms = [M.ConfusionMatrix(3, rng.integers(0, 8, (3, 3))) for _ in range(4)]
    total = M.accumulate_folds(cms)
    direct = M.ConfusionMatrix(3, sum(cm.counts for cm in cms))
    for i in range(3):
        a = M.class_metrics(total, i)
        b = M.class_metrics(direct, i)
        assert all(a[k].value == b[k].value for k in M.CLASS_METRIC_NAMES)


# ---------------------------------------------------------------------- ROC

def test_roc_perfect_separation():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]])
    labels = np.array([0, 0, 1, 1])
    out = M.roc_curve(scores, labels, 0)
    assert out.auc == 1.0 and not out.degenerate


def test_roc_all_tied_scores_gives_half():
    scores = np.full((6, 2), 0.5)
    labels = np.array([0, 1, 0, 1, 0, 1])
    assert M.roc_curve(scores, labels, 0).auc == 0.5


def test_roc_pair_counting_example():
    # labels [1,0,1,0] with class-1 scores [0.9,0.8,0.4,0.1]: 3 of 4 pairs concordant
    scores = np.zeros((4, 2))
    scores[:, 1] = [0.9, 0.8, 0.4, 0.1]
    scores[:, 0] = 1.0 - scores[:, 1]
    labels = np.array([1, 0, 1, 0])
    out = M.roc_curve(scores, labels, 1)
    assert np.isclose(out.auc, 0.75)


def test_roc_auc_equals_pair_probability(rng):
    # mid-rank pair counting oracle on random instances
    for _ in range(20):
        n = int(rng.integers(4, 12))
        scores = rng.random((n, 2))
        labels = rng.integers(0, 2, n)
        if len(set(labels.tolist())) < 2:
            continue
        out = M.roc_curve(scores, labels, 1)
        s = scores[:, 1]
        pos = s[labels == 1]
        neg = s[labels == 0]
        pairs = [(1.0 if p > q else 0.5 if p == q else 0.0) for p in pos for q in neg]
        assert abs(out.auc - np.mean(pairs)) < 1e-12


def test_roc_single_class_flagged():
    out = M.roc_curve(np.array([[0.4, 0.6], [0.3, 0.7]]), np.array([1, 1]), 1)
    assert out.degenerate and np.isnan(out.auc)


def test_roc_points_ordering():
    scores = np.array([[0.2, 0.8], [0.6, 0.4], [0.9, 0.1], [0.5, 0.5]])
    labels = np.array([1, 0, 0, 1])
    out = M.roc_curve(scores, labels, 1)
    thresholds = [p[2] for p in out.points]
    assert thresholds == sorted(thresholds, reverse=True)
    assert out.points[0][:2] == (0.0, 0.0)
    assert out.points[-1][:2] == (1.0, 1.0)


def test_roc_micro_average_pools_everything(rng):
    scores = rng.dirichlet(np.ones(3), size=30)
    labels = rng.integers(0, 3, 30)
    out = M.roc_micro_average(scores, labels)
    assert not out.degenerate
    assert 0.0 <= out.auc <= 1.0


# ------------------------------------------------------------------- report

def test_report_overall_is_exact_recombination(rng):
    cm = M.ConfusionMatrix(3, rng.integers(0, 40, (3, 3)) + np.diag([30, 20, 25]))
    report = M.build_report(cm, ["COVID19", "MERS", "SARS"])
    weights = cm.class_counts()
    for metric in M.CLASS_METRIC_NAMES:
        per = [report.per_class[c][metric].value for c in report.class_names]
        assert report.overall[metric].value == M.weighted_overall(per, weights)
        assert report.overall[metric].n == cm.total


def test_report_metric_ci_invariant(rng):
    cm = M.ConfusionMatrix(3, rng.integers(1, 30, (3, 3)))
    report = M.build_report(cm, ["a", "b", "c"])
    for row in report.per_class.values():
        for mc in row.values():
            assert np.isclose(mc.half_width,
                              mc.z * np.sqrt(mc.value * (1 - mc.value) / mc.n))


def test_report_weighted_sensitivity_equals_total_accuracy(rng):
    # overall sensitivity with true-class weights == total correct / total
    cm = M.ConfusionMatrix(3, rng.integers(1, 30, (3, 3)))
    report = M.build_report(cm, ["a", "b", "c"])
    assert np.isclose(report.overall["sensitivity"].value,
                      np.trace(cm.counts) / cm.total)


def test_csv_writers(tmp_path, rng):
    cm = M.ConfusionMatrix(3, rng.integers(1, 20, (3, 3)))
    report = M.build_report(cm, ["COVID19", "MERS", "SARS"])
    M.write_metrics_csv(report, tmp_path / "m.csv")
    M.write_confusion_csv(cm, tmp_path / "c.csv", ["COVID19", "MERS", "SARS"])
    roc = M.roc_curve(rng.dirichlet(np.ones(3), 20), rng.integers(0, 3, 20), 0)
    M.write_roc_csv(roc, tmp_path / "r.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "scope,metric,value,half_width,n,degenerate"
    assert len(lines) == 1 + 4 * len(M.CLASS_METRIC_NAMES)  # 3 classes + overall
    grid = (tmp_path / "c.csv").read_text().splitlines()
    assert len(grid) == 4
    assert (tmp_path / "r.csv").read_text().startswith("fpr,tpr,threshold")
