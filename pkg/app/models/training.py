"""
Pydantic models for training, datasets and run records.

This module defines:
1. TrainConfig and its enums (training mode, split protocol, threshold mode)
2. ManifestRow / DatasetManifest, the on-disk dataset index
3. CheckpointMeta, the metadata block stored with the weights
4. EpochLog / InferenceLog, the JSONL run records
5. InferenceResult, the answer of the three inference routes
"""

from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from app.models.channel import Label, ScenarioDescriptor
from app.models.network import Route


# ============================================================================
# Enums
# ============================================================================

class TrainingMode(str, Enum):
    """Which losses drive the optimiser"""
    JOINT = "joint"
    SEPARATE_VISION = "separate_vision"
    SEPARATE_ACOUSTIC = "separate_acoustic"


class SplitMode(str, Enum):
    """Evaluation protocol used to build the splits"""
    RANDOM = "random"
    CROSS_SUBJECT = "cross_subject"
    CROSS_DEVICE = "cross_device"
    CROSS_VARIABLE = "cross_variable"


class HeldoutVariable(str, Enum):
    """Capture variable held out in the cross-variable protocol"""
    DISTANCE = "distance"
    NOISE = "noise"
    HEAD_POSE = "head_pose"


class ThresholdMode(str, Enum):
    """How the HTER/ACC operating threshold is chosen"""
    FIXED = "fixed"
    DEV = "dev"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# ============================================================================
# Training configuration
# ============================================================================

class TrainConfig(BaseModel):
    """
    Optimisation and protocol settings (`train.` keys).

    Defaults are desk scale; the published setup used 100 epochs and
    batch size 256.
    """
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    alpha: float = Field(0.5, ge=0, description="Weight of the single-modality losses")
    training_mode: TrainingMode = TrainingMode.JOINT
    seed: int = 0
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_mode: SplitMode = SplitMode.RANDOM
    test_devices: List[int] = Field(default_factory=list)
    heldout_variable: HeldoutVariable = HeldoutVariable.DISTANCE
    heldout_value: Optional[float] = None
    variable_device: Optional[int] = Field(None, ge=0, description="Device of the cross-variable protocol; None picks the lowest id")
    threshold_mode: ThresholdMode = ThresholdMode.FIXED
    threshold: float = Field(0.5, ge=0, le=1)
    workers: int = Field(4, ge=1)

    @field_validator("split_ratios")
    @classmethod
    def check_ratios(cls, v):
        if any(r < 0 for r in v):
            raise ValueError("split ratios must be non-negative")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(v)}")
        return v


# ============================================================================
# Dataset manifest
# ============================================================================

MANIFEST_COLUMNS = ("id", "label", "device", "image_path", "wav_path", "scenario_json")


class ManifestRow(BaseModel):
    """One (image, recording) pair; paths are relative to the dataset root."""
    id: str
    label: Label
    device: int = Field(..., ge=0)
    image_path: str
    wav_path: str
    scenario: ScenarioDescriptor
    split: Optional[Split] = None


class DatasetManifest(BaseModel):
    """Rows of a generated dataset plus their split assignment."""
    root: Path
    rows: List[ManifestRow] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def split_rows(self, split: Split) -> List[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    @property
    def devices(self) -> List[int]:
        return sorted({r.device for r in self.rows})

    @property
    def subjects(self) -> List[int]:
        return sorted({r.scenario.subject for r in self.rows})


# ============================================================================
# Checkpoint metadata
# ============================================================================

class CheckpointMeta(BaseModel):
    """Metadata block stored in front of the tensor records."""
    config: Dict[str, str] = Field(default_factory=dict, description="Flat config snapshot")
    best_hter: Optional[float] = None
    epoch: int = Field(0, ge=0)
    selection_head: Optional[str] = None
    threshold: float = 0.5


# ============================================================================
# Run records
# ============================================================================

class EpochLog(BaseModel):
    """One line of the training JSONL log"""
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    epoch: int
    train_losses: Dict[str, float]
    total_loss: float
    val_hter: float
    selection_head: str
    is_best: bool
    duration_ms: float


class InferenceLog(BaseModel):
    """One line of the inference JSONL log"""
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    input_hash: str
    route: str
    success: bool
    errors: Optional[List[str]] = None
    scores: Optional[Dict[str, float]] = None
    fallback: bool = False
    processing_time_ms: float


class InferenceResult(BaseModel):
    """Sigmoid scores per head, in [0, 1]."""
    route: Route
    scores: Dict[str, float]
    fallback: bool = False
    fallback_reason: Optional[str] = None

    @model_validator(mode="after")
    def check_scores(self):
        for head, s in self.scores.items():
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score for head '{head}' outside [0, 1]: {s}")
        return self

    @property
    def decision_score(self) -> float:
        """Score of the head the route answers with."""
        return self.scores[self.route.value]
