"""
Pydantic models for the synthetic acoustic channel and dataset.

Data Structure:
- ChannelScenario: taps, delays, noise and device curve of one capture
- SurfaceModel: what is presented to the sensor (live face, print, replay)
- ScenarioDescriptor: the per-row scenario (subject, distance, head pose, channel) stored in the manifest
- SimulationConfig: knobs of the dataset generator
"""

from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.signal import Waveform


class SurfaceKind(str, Enum):
    """Presented surface"""
    LIVE_FACE = "live_face"
    PRINT_ATTACK = "print_attack"
    REPLAY_ATTACK = "replay_attack"


class Label(int, Enum):
    """Class label; higher scores mean more bonafide"""
    ATTACK = 0
    BONAFIDE = 1


def label_for_surface(kind: SurfaceKind) -> Label:
    return Label.BONAFIDE if kind == SurfaceKind.LIVE_FACE else Label.ATTACK


# ============================================================================
# Channel
# ============================================================================

class DeviceResponse(BaseModel):
    """Gain curve of one speaker/microphone pair, linearly interpolated between knots."""
    model_config = ConfigDict(frozen=True)

    device_id: int = Field(0, ge=0)
    knots_hz: List[float] = Field(default_factory=list)
    gains: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_knots(self):
        if len(self.knots_hz) != len(self.gains):
            raise ValueError("knots_hz and gains must have the same length")
        if any(b <= a for a, b in zip(self.knots_hz, self.knots_hz[1:])):
            raise ValueError("knots_hz must be strictly increasing")
        if any(g <= 0 for g in self.gains):
            raise ValueError("device gains must be positive")
        return self

    @property
    def is_flat(self) -> bool:
        return not self.knots_hz


class ChannelScenario(BaseModel):
    """
    One capture geometry.

    face_echo_delay and background_echo_delay are measured from the direct
    path arrival. A noise_snr_db of None (or +inf) disables noise.
    """
    direct_path_delay: int = Field(..., ge=0)
    direct_path_gain: float = Field(..., gt=0)
    face_echo_delay: int = Field(..., gt=0)
    face_impulse_response: List[float] = Field(..., min_length=1, max_length=60)
    background_echo_delay: int = Field(..., gt=0)
    background_gain: float = Field(0.0, ge=0)
    noise_snr_db: Optional[float] = None
    device_response: DeviceResponse = Field(default_factory=DeviceResponse)

    @model_validator(mode="after")
    def check_ordering(self):
        face_peak = max(abs(t) for t in self.face_impulse_response)
        if not self.direct_path_gain > face_peak:
            raise ValueError(
                f"direct_path_gain ({self.direct_path_gain}) must exceed face peak gain ({face_peak})"
            )
        if self.background_gain > 0 and not face_peak > self.background_gain:
            raise ValueError(
                f"face peak gain ({face_peak}) must exceed background_gain ({self.background_gain})"
            )
        if not self.background_echo_delay > self.face_echo_delay:
            raise ValueError("background_echo_delay must come after face_echo_delay")
        return self

    @property
    def noiseless(self) -> bool:
        return self.noise_snr_db is None or np.isinf(self.noise_snr_db)

    @property
    def max_delay(self) -> int:
        return self.direct_path_delay + max(
            self.face_echo_delay + len(self.face_impulse_response) - 1,
            self.background_echo_delay,
        )


class SurfaceModel(BaseModel):
    """
    Presented surface.

    geometry_params holds the face outline (two ellipse semi-axes) followed
    by (offset, relative amplitude) pairs of the relief taps.
    """
    kind: SurfaceKind
    geometry_params: List[float] = Field(default_factory=list)
    skin_tone: Tuple[float, float, float] = (0.8, 0.6, 0.5)


class ScenarioDescriptor(BaseModel):
    """Everything the generator drew for one manifest row."""
    subject: int = Field(..., ge=0)
    surface: SurfaceKind
    distance_cm: float = Field(..., gt=0)
    head_pose_deg: float = Field(0.0, ge=-90, le=90, description="Yaw of the presented surface")
    channel: ChannelScenario


class SyntheticSample(BaseModel):
    """A generated (image, recording) pair"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    recording: Waveform
    label: Label
    scenario: ScenarioDescriptor

    @field_validator("image")
    @classmethod
    def check_image(cls, v):
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {v.shape}")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("image intensities must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def check_label(self):
        if self.label != label_for_surface(self.scenario.surface):
            raise ValueError(f"label {self.label.name} inconsistent with {self.scenario.surface.value}")
        return self


# ============================================================================
# Generator configuration
# ============================================================================

class SimulationConfig(BaseModel):
    """Dataset generator knobs (`sim.` keys)."""
    image_size: int = Field(128, ge=8)
    n_subjects: int = Field(8, ge=1)
    distances_cm: List[float] = Field(default_factory=lambda: [25.0, 35.0, 45.0])
    head_poses_deg: List[float] = Field(default_factory=lambda: [-10.0, 0.0, 10.0])
    snr_db_choices: List[Optional[float]] = Field(default_factory=lambda: [None])
    device_knot_spacing_hz: float = Field(3000.0, gt=0)
    device_gain_range: Tuple[float, float] = (0.8, 1.2)
    band_low_hz: float = Field(10000.0, gt=0)
    band_high_hz: float = Field(22000.0, gt=0)
    speed_of_sound: float = Field(343.0, gt=0)
    speaker_mic_offset_m: float = Field(0.1, ge=0)
    workers: int = Field(4, ge=1)

    @field_validator("distances_cm")
    @classmethod
    def check_distances(cls, v):
        if not v or any(d <= 0 for d in v):
            raise ValueError("distances_cm must be a non-empty list of positive values")
        return v

    @field_validator("head_poses_deg")
    @classmethod
    def check_poses(cls, v):
        if not v or any(abs(p) >= 90 for p in v):
            raise ValueError("head_poses_deg must be a non-empty list of yaws inside (-90, 90)")
        return v

    @model_validator(mode="after")
    def check_band(self):
        if not self.band_low_hz < self.band_high_hz:
            raise ValueError("band_low_hz must be below band_high_hz")
        lo, hi = self.device_gain_range
        if not 0 < lo <= hi:
            raise ValueError("device_gain_range must be positive and ordered")
        return self
