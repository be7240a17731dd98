"""
Biometric Metrics Service

Threshold metrics (ACC, HTER) and threshold-free metrics (ROC, AUC, EER)
over a ScoreSet. Bonafide is the positive class and a sample is predicted
bonafide when its score is at or above the threshold.
"""

import logging
from typing import Dict, Mapping, Sequence, Union

import numpy as np
from pydantic import ValidationError
from scipy.integrate import trapezoid

from app.models.metrics import (
    HEADS,
    ConfusionCounts,
    EvaluationReport,
    MetricRow,
    RocCurve,
    ScoreSet,
)
from app.services.errors import InvalidInputError

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class MetricsError(InvalidInputError):
    """Raised when a metric cannot be computed"""
    pass


class OneClassError(MetricsError):
    """Raised when a metric needs both classes and one is absent"""
    def __init__(self, metric: str, n_bonafide: int, n_attack: int):
        self.metric = metric
        super().__init__(
            f"{metric} needs both classes (bonafide={n_bonafide}, attack={n_attack})"
        )


def make_score_set(scores: Sequence[float], labels: Sequence[int]) -> ScoreSet:
    """Build a ScoreSet, reporting validation problems as MetricsError."""
    try:
        return ScoreSet(scores=[float(s) for s in scores], labels=[int(y) for y in labels])
    except ValidationError as e:
        raise MetricsError(f"Invalid score set: {e}") from e


def _require_both(metric: str, s: ScoreSet) -> None:
    if s.n_bonafide == 0 or s.n_attack == 0:
        raise OneClassError(metric, s.n_bonafide, s.n_attack)


# ============================================================================
# Threshold metrics
# ============================================================================

def confusion_at(s: ScoreSet, threshold: float) -> ConfusionCounts:
    scores, labels = s.arrays()
    predicted = scores >= threshold
    bonafide = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & bonafide)),
        tn=int(np.sum(~predicted & ~bonafide)),
        fp=int(np.sum(predicted & ~bonafide)),
        fn=int(np.sum(~predicted & bonafide)),
    )


def acc(c: ConfusionCounts) -> float:
    """(TP + TN) / all."""
    if c.total == 0:
        raise MetricsError("ACC of an empty confusion matrix")
    return (c.tp + c.tn) / c.total


def hter(c: ConfusionCounts) -> float:
    """
    Half total error rate, (FAR + FRR) / 2.

    Raises:
        OneClassError: If either class has no samples
    """
    if c.tn + c.fp == 0 or c.tp + c.fn == 0:
        raise OneClassError("HTER", c.tp + c.fn, c.tn + c.fp)
    far = c.fp / (c.tn + c.fp)
    frr = c.fn / (c.tp + c.fn)
    return 0.5 * (far + frr)


# ============================================================================
# ROC, AUC, EER
# ============================================================================

def roc_curve(s: ScoreSet) -> RocCurve:
    """
    ROC with one step per distinct score.

    Scores are sorted descending and equal scores form one group, so a tie
    between a bonafide and an attack sample produces a diagonal segment.

    Raises:
        OneClassError: If either class has no samples
    """
    _require_both("ROC", s)
    scores, labels = s.arrays()
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]

    # last index of every tie group
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp

    fpr = np.r_[0.0, fp / s.n_attack]
    tpr = np.r_[0.0, tp / s.n_bonafide]
    thresholds = np.r_[np.inf, scores[ends]]
    return RocCurve(fpr=fpr.tolist(), tpr=tpr.tolist(), thresholds=thresholds.tolist())


def auc(s: ScoreSet) -> float:
    """Trapezoid area under the grouped ROC."""
    roc = roc_curve(s)
    return float(trapezoid(roc.tpr, roc.fpr))


def _eer_point(roc: RocCurve):
    fpr = np.asarray(roc.fpr)
    tpr = np.asarray(roc.tpr)
    # fpr + tpr grows strictly along the polyline; FPR = FNR where it reaches 1
    u = fpr + tpr
    return fpr, u


def eer(s: ScoreSet) -> float:
    """
    Rate at which FPR equals FNR, interpolated along the ROC polyline.

    Raises:
        OneClassError: If either class has no samples
    """
    fpr, u = _eer_point(roc_curve(s))
    return float(np.interp(1.0, u, fpr))


def eer_threshold(s: ScoreSet) -> float:
    """Threshold of the first ROC point at or past the equal-error crossing."""
    roc = roc_curve(s)
    _, u = _eer_point(roc)
    i = int(np.searchsorted(u, 1.0, side="left"))
    return float(roc.thresholds[min(max(i, 1), len(roc.thresholds) - 1)])


# ============================================================================
# Report
# ============================================================================

def head_metrics(s: ScoreSet, threshold: float) -> Dict[str, float]:
    """AUC, ACC, HTER and EER for one head."""
    counts = confusion_at(s, threshold)
    return {"auc": auc(s), "acc": acc(counts), "hter": hter(counts), "eer": eer(s)}


def build_report(
    score_sets: Mapping[str, ScoreSet],
    thresholds: Union[float, Mapping[str, float]] = 0.5,
    split: str = "test",
    distortion: str = None,
) -> EvaluationReport:
    """
    One row per (metric, head) in the order AUC, ACC, HTER, EER.

    Raises:
        MetricsError: If a head is missing
    """
    missing = [h for h in HEADS if h not in score_sets]
    if missing:
        raise MetricsError(f"Report needs scores for every head; missing {missing}")
    if not isinstance(thresholds, Mapping):
        thresholds = {h: float(thresholds) for h in HEADS}

    rows = []
    for head in HEADS:
        values = head_metrics(score_sets[head], thresholds[head])
        rows += [MetricRow(metric=m, head=head, value=v) for m, v in values.items()]
        logger.debug("Metrics for %s head: %s", head, values)
    return EvaluationReport(
        split=split, thresholds={h: float(thresholds[h]) for h in HEADS}, rows=rows, distortion=distortion
    )
