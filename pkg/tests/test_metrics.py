"""Tests for ACC, HTER, ROC, AUC, EER and the evaluation report."""

import numpy as np
import pytest

from app.models.metrics import HEADS, METRICS, ConfusionCounts
from app.services.metrics import (
    MetricsError,
    OneClassError,
    acc,
    auc,
    build_report,
    confusion_at,
    eer,
    eer_threshold,
    hter,
    make_score_set,
    roc_curve,
)


def balanced_set(rng, n_per_class: int = 10, ties: bool = False):
    labels = rng.permutation([1] * n_per_class + [0] * n_per_class)
    raw = rng.normal(loc=labels * 0.8, scale=1.0)
    scores = np.round(raw, 1) if ties else raw
    return make_score_set(scores, labels)


def mann_whitney(s) -> float:
    scores, labels = s.arrays()
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


# ============================================================================
# Threshold metrics
# ============================================================================

def test_acc_hand_case():
    assert acc(ConfusionCounts(tp=8, tn=7, fp=3, fn=2)) == 0.75


def test_hter_hand_case():
    assert hter(ConfusionCounts(tp=2, tn=3, fp=1, fn=2)) == 0.375


def test_hter_of_complemented_predictions():
    c = ConfusionCounts(tp=5, tn=9, fp=4, fn=1)
    flipped = ConfusionCounts(tp=c.fn, tn=c.fp, fp=c.tn, fn=c.tp)
    assert hter(flipped) == pytest.approx(1.0 - hter(c))
    assert 0.0 <= hter(c) <= 1.0


def test_confusion_counts_ties_as_bonafide():
    s = make_score_set([0.5, 0.5, 0.2, 0.9], [1, 0, 0, 1])
    c = confusion_at(s, 0.5)
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 1, 1, 0)


def test_threshold_extremes():
    s = make_score_set([0.1, 0.4, 0.6, 0.8], [0, 0, 1, 1])
    everyone_attack = confusion_at(s, 1.5)
    assert hter(everyone_attack) == 0.5
    everyone_bonafide = confusion_at(s, -1.0)
    assert hter(everyone_bonafide) == 0.5
    assert acc(everyone_bonafide) == 0.5


def test_hter_needs_both_classes():
    with pytest.raises(OneClassError):
        hter(ConfusionCounts(tp=3, tn=0, fp=0, fn=1))


# ============================================================================
# ROC and AUC
# ============================================================================

def test_perfect_separation():
    s = make_score_set([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert auc(s) == 1.0
    assert eer(s) == 0.0
    threshold = eer_threshold(s)
    assert threshold == 0.8
    assert hter(confusion_at(s, threshold)) == 0.0


def test_reversed_scores():
    s = make_score_set([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    assert auc(s) == 0.0
    assert eer(s) == 1.0


def test_single_tie_group_gives_chance_auc():
    s = make_score_set([0.3] * 6, [1, 0, 1, 0, 0, 1])
    roc = roc_curve(s)
    assert roc.fpr == [0.0, 1.0]
    assert roc.tpr == [0.0, 1.0]
    assert auc(s) == 0.5


def test_roc_starts_at_origin_and_ends_at_one(rng):
    roc = roc_curve(balanced_set(rng, ties=True))
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert roc.thresholds[0] == float("inf")
    assert all(a > b for a, b in zip(roc.thresholds, roc.thresholds[1:]))


@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pair_counting(rng, ties):
    for _ in range(100):
        s = balanced_set(rng, n_per_class=25, ties=ties)
        assert abs(auc(s) - mann_whitney(s)) <= 1e-12


def test_auc_invariant_under_increasing_transforms(rng):
    s = balanced_set(rng)
    scores, labels = s.arrays()
    base = auc(s)
    for transformed in (np.exp(scores), 3.0 * scores + 2.0, scores ** 3):
        assert auc(make_score_set(transformed, labels)) == pytest.approx(base, abs=1e-12)


def test_flipped_labels_complement_auc(rng):
    s = balanced_set(rng)
    scores, labels = s.arrays()
    flipped = make_score_set(scores, 1 - labels)
    assert auc(s) + auc(flipped) == pytest.approx(1.0, abs=1e-12)


# ============================================================================
# EER
# ============================================================================

def dense_grid_eer(s, points: int = 1_000_001) -> float:
    """FPR where |FPR - FNR| is smallest over a dense walk along the ROC polyline."""
    roc = roc_curve(s)
    t = np.linspace(0.0, len(roc.fpr) - 1, points)
    knots = np.arange(len(roc.fpr))
    fpr = np.interp(t, knots, roc.fpr)
    fnr = 1.0 - np.interp(t, knots, roc.tpr)
    return float(fpr[np.argmin(np.abs(fpr - fnr))])


def test_eer_matches_dense_grid(rng):
    for _ in range(5):
        s = balanced_set(rng, ties=True)
        assert abs(eer(s) - dense_grid_eer(s)) <= 1e-5


def test_eer_point_balances_the_rates(rng):
    for _ in range(20):
        s = balanced_set(rng)
        roc = roc_curve(s)
        u = np.asarray(roc.fpr) + np.asarray(roc.tpr)
        fnr = 1.0 - np.interp(1.0, u, roc.tpr)
        assert abs(eer(s) - fnr) <= 1e-9
        assert 0.0 <= eer(s) <= max(roc.fpr)


def test_one_class_sets_are_rejected():
    s = make_score_set([0.2, 0.7], [1, 1])
    for fn in (roc_curve, auc, eer):
        with pytest.raises(OneClassError):
            fn(s)


def test_invalid_score_sets():
    with pytest.raises(MetricsError):
        make_score_set([0.1, 0.2], [1, 2])
    with pytest.raises(MetricsError):
        make_score_set([0.1], [1, 0])
    with pytest.raises(MetricsError):
        make_score_set([float("nan"), 0.1], [1, 0])


# ============================================================================
# Report
# ============================================================================

def test_report_rows_and_tsv(rng):
    sets = {head: balanced_set(rng) for head in HEADS}
    report = build_report(sets, 0.0, split="val")
    assert len(report.rows) == 12
    assert [(r.metric, r.head) for r in report.rows] == [(m, h) for h in HEADS for m in METRICS]
    assert report.value("auc", "fusion") == pytest.approx(auc(sets["fusion"]))

    lines = report.to_tsv().splitlines()
    assert lines[0] == "metric\thead\tvalue"
    assert len(lines) == 13


def test_report_per_head_thresholds_and_missing_heads(rng):
    sets = {head: balanced_set(rng) for head in HEADS}
    thresholds = {"vision": 0.1, "acoustic": 0.2, "fusion": 0.3}
    report = build_report(sets, thresholds)
    assert report.thresholds == thresholds
    assert report.value("hter", "acoustic") == hter(confusion_at(sets["acoustic"], 0.2))
    with pytest.raises(MetricsError):
        build_report({"vision": sets["vision"]})
