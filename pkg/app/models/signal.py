"""
Pydantic models for the emitted probe signal.

This module defines:
1. Waveform, the mono sample container shared by every stage
2. ChirpSpec and ProbeSignalConfig, the probe layout (pilot + nine chirps)
"""

from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ============================================================================
# Waveform
# ============================================================================

class Waveform(BaseModel):
    """Mono discrete-time signal with its sample rate."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray = Field(..., description="Real-valued samples, float64")
    sample_rate: int = Field(..., gt=0, description="Sample rate in Hz")

    @field_validator("samples", mode="before")
    @classmethod
    def coerce_samples(cls, v):
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"Waveform samples must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Waveform samples must be finite")
        return arr

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples=samples, sample_rate=self.sample_rate)


# ============================================================================
# Probe configuration
# ============================================================================

class WindowKind(str, Enum):
    """Taper applied to each chirp"""
    HAMMING = "hamming"
    NONE = "none"


class ChirpSpec(BaseModel):
    """One linear frequency sweep of the probe."""
    model_config = ConfigDict(frozen=True)

    f_start: float = Field(..., gt=0, description="Start frequency (Hz)")
    f_end: float = Field(..., gt=0, description="End frequency (Hz)")
    duration_samples: int = Field(..., ge=16, description="Chirp length in samples")
    amplitude: float = Field(0.5, gt=0, le=1.0)

    @model_validator(mode="after")
    def check_sweep(self):
        if not self.f_start < self.f_end:
            raise ValueError(f"f_start ({self.f_start}) must be below f_end ({self.f_end})")
        return self


# Sweep groups 12-17, 14-19 and 16-21 kHz
DEFAULT_CHIRP_BANDS: Tuple[Tuple[float, float], ...] = (
    (12000.0, 17000.0),
    (14000.0, 19000.0),
    (16000.0, 21000.0),
)


def default_chirp_specs(
    bands=DEFAULT_CHIRP_BANDS,
    duration_samples: int = 1764,
    amplitude: float = 0.5,
    repetitions: int = 3,
) -> List[ChirpSpec]:
    """The group sequence repeated `repetitions` times."""
    group = [
        ChirpSpec(f_start=lo, f_end=hi, duration_samples=duration_samples, amplitude=amplitude)
        for lo, hi in bands
    ]
    return group * repetitions


class ProbeSignalConfig(BaseModel):
    """
    Layout of the emitted probe.

    Sample rate, chirp duration and pilot duration are not given by the
    method description; 44.1 kHz follows from the pilot sitting at fs/4.
    """
    sample_rate: int = Field(44100, gt=0)
    pilot_freq: float = Field(11025.0, gt=0)
    pilot_duration_samples: int = Field(512, ge=0, description="Pilot tone burst length")
    pilot_amplitude: float = Field(0.5, gt=0, le=1.0)
    pilot_taper_samples: int = Field(8, ge=0, description="Raised-cosine fade at each pilot edge")
    gap_pilot_to_first_chirp: int = Field(8000, gt=0)
    gap_between_chirps: int = Field(3000, gt=0)
    tail_samples: int = Field(3000, ge=0, description="Silence after the last chirp")
    chirp_specs: List[ChirpSpec] = Field(default_factory=default_chirp_specs)
    window: WindowKind = WindowKind.HAMMING

    @model_validator(mode="after")
    def check_layout(self):
        nyquist = self.sample_rate / 2
        if not self.chirp_specs:
            raise ValueError("chirp_specs is empty")
        if len(self.chirp_specs) != 9:
            raise ValueError(f"expected 9 chirp specs, got {len(self.chirp_specs)}")
        group = self.chirp_specs[:3]
        if self.chirp_specs != group * 3:
            raise ValueError("chirp specs must repeat one 3-chirp group three times")
        for spec in self.chirp_specs:
            if spec.f_end >= nyquist:
                raise ValueError(f"chirp end {spec.f_end} Hz is not below Nyquist {nyquist} Hz")
        if self.pilot_freq >= min(s.f_start for s in self.chirp_specs):
            raise ValueError("pilot_freq must be below every chirp start frequency")
        longest = max(s.duration_samples for s in self.chirp_specs)
        if self.gap_between_chirps <= longest or self.gap_pilot_to_first_chirp <= longest:
            raise ValueError("gaps must exceed the chirp duration")
        return self

    @property
    def chirp_length(self) -> int:
        return self.chirp_specs[0].duration_samples

    def chirp_onset(self, k: int) -> int:
        """Sample index of chirp k (0-based) in the assembled probe."""
        if not 0 <= k < len(self.chirp_specs):
            raise IndexError(f"chirp index {k} out of range")
        offset = self.pilot_duration_samples + self.gap_pilot_to_first_chirp
        for spec in self.chirp_specs[:k]:
            offset += spec.duration_samples + self.gap_between_chirps
        return offset

    @property
    def total_length(self) -> int:
        last = len(self.chirp_specs) - 1
        return self.chirp_onset(last) + self.chirp_specs[last].duration_samples + self.tail_samples
