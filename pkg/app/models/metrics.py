"""
Pydantic models for evaluation.

This module defines:
1. ScoreSet, scores with their labels (higher score means more bonafide)
2. ConfusionCounts at one threshold
3. RocCurve, the grouped-threshold ROC polyline
4. MetricRow / EvaluationReport, the 3 heads x 4 metrics report
"""

from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator


HEADS = ("vision", "acoustic", "fusion")
METRICS = ("auc", "acc", "hter", "eer")


class ScoreSet(BaseModel):
    """Scores and labels; label 1 is bonafide, 0 is attack."""
    scores: List[float]
    labels: List[int]

    @field_validator("labels")
    @classmethod
    def check_labels(cls, v):
        if any(y not in (0, 1) for y in v):
            raise ValueError("labels must be 0 (attack) or 1 (bonafide)")
        return v

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.scores) != len(self.labels):
            raise ValueError(
                f"scores and labels differ in length ({len(self.scores)} vs {len(self.labels)})"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        return self

    def __len__(self) -> int:
        return len(self.scores)

    def arrays(self):
        return np.asarray(self.scores, dtype=np.float64), np.asarray(self.labels, dtype=np.int64)

    @property
    def n_bonafide(self) -> int:
        return int(np.sum(self.labels))

    @property
    def n_attack(self) -> int:
        return len(self.labels) - self.n_bonafide


class ConfusionCounts(BaseModel):
    """Bonafide is the positive class."""
    tp: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class RocCurve(BaseModel):
    """
    ROC points from the strictest threshold down.

    Point 0 is (0, 0) with threshold +inf; each later point lowers the
    threshold to the next distinct score, so tied scores move together.
    """
    fpr: List[float]
    tpr: List[float]
    thresholds: List[float]


class MetricRow(BaseModel):
    metric: str
    head: str
    value: float


class EvaluationReport(BaseModel):
    """Metric rows for every head; serialised as TSV."""
    split: str
    thresholds: Dict[str, float]
    rows: List[MetricRow] = Field(default_factory=list)
    distortion: Optional[str] = None
    evaluated: int = Field(0, ge=0, description="Rows the metrics were computed on")
    skipped: List[str] = Field(default_factory=list, description="Rows of the split that failed preprocessing")

    def value(self, metric: str, head: str) -> float:
        for row in self.rows:
            if row.metric == metric and row.head == head:
                return row.value
        raise KeyError(f"{metric}/{head}")

    def to_tsv(self) -> str:
        lines = ["metric\thead\tvalue"]
        lines += [f"{r.metric}\t{r.head}\t{r.value:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"
