"""
Pydantic models for the echo extraction pipeline.

Data Structure:
- PipelineSettings: tunable constants (`pipeline.` keys)
- PipelineConfig: settings plus the emitted templates and probe layout
- ChirpClipSet: the nine clips cut around the chirp arrivals
- FaceEcho: the nine 60-sample face echoes, concatenated
- Spectrogram: log-compressed, min-max normalised STFT magnitude
"""

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.signal import Waveform


class PipelineSettings(BaseModel):
    """Processing constants; STFT geometry defaults give a 33x30 grid."""
    highpass_cutoff: float = Field(10000.0, gt=0, description="High-pass cutoff (Hz)")
    fir_taps: int = Field(255, ge=3, description="Odd FIR length")
    echo_window: int = Field(60, ge=1, description="Face echo samples per clip")
    search_span: int = Field(600, ge=1, description="Lags searched after each direct path")
    direct_guard: int = Field(12, ge=0, description="Lags skipped after the cancelled direct path")
    stft_window: int = Field(64, ge=2)
    stft_hop: int = Field(16, ge=1)
    pilot_confidence: float = Field(0.5, ge=0, le=1, description="Minimum normalised pilot peak")
    direct_confidence: float = Field(0.3, ge=0, le=1, description="Minimum normalised direct peak")
    peak_floor: float = Field(0.65, gt=0, le=1, description="Echo peak floor relative to the clip maximum")
    max_echo_lag: int = Field(180, ge=1, description="End of the face-echo search in lags; the background echo lies beyond")

    @field_validator("fir_taps")
    @classmethod
    def check_odd(cls, v):
        if v % 2 == 0:
            raise ValueError(f"fir_taps must be odd for a type-I high-pass, got {v}")
        return v

    @model_validator(mode="after")
    def check_geometry(self):
        if not self.search_span > self.echo_window:
            raise ValueError("search_span must exceed echo_window")
        if not self.stft_hop <= self.stft_window:
            raise ValueError("stft_hop must not exceed stft_window")
        if self.direct_guard + self.echo_window > self.search_span + 1:
            raise ValueError("direct_guard leaves no room for an echo window in the search span")
        if self.direct_guard + self.echo_window > self.max_echo_lag:
            raise ValueError("max_echo_lag leaves no room for an echo window after direct_guard")
        return self


class PipelineConfig(PipelineSettings):
    """Settings bound to one probe: templates and the pilot-to-chirp layout."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pilot_template: Waveform
    chirp_templates: List[Waveform]
    gap_pilot_to_first_chirp: int = Field(8000, gt=0)
    gap_between_chirps: int = Field(3000, gt=0)

    @model_validator(mode="after")
    def check_templates(self):
        if len(self.chirp_templates) != 9:
            raise ValueError(f"expected 9 chirp templates, got {len(self.chirp_templates)}")
        rates = {t.sample_rate for t in self.chirp_templates} | {self.pilot_template.sample_rate}
        if len(rates) != 1:
            raise ValueError(f"templates disagree on sample rate: {sorted(rates)}")
        return self

    @property
    def sample_rate(self) -> int:
        return self.pilot_template.sample_rate

    def chirp_offset(self, k: int) -> int:
        """Offset of chirp k from the pilot start."""
        offset = len(self.pilot_template) + self.gap_pilot_to_first_chirp
        for t in self.chirp_templates[:k]:
            offset += len(t) + self.gap_between_chirps
        return offset

    @property
    def clip_length(self) -> int:
        return max(len(t) for t in self.chirp_templates) + self.search_span

    @property
    def layout_length(self) -> int:
        """Samples needed after the pilot start to cut all nine clips."""
        return self.chirp_offset(8) + self.clip_length


class ChirpClipSet(BaseModel):
    """Nine equal-length clips, each starting at a chirp's direct-path arrival."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    clips: List[Waveform]
    onsets: List[int]

    @model_validator(mode="after")
    def check_clips(self):
        if len(self.clips) != 9 or len(self.onsets) != 9:
            raise ValueError("a clip set holds exactly 9 clips and 9 onsets")
        if len({len(c) for c in self.clips}) != 1:
            raise ValueError("clips must have equal length")
        if any(b <= a for a, b in zip(self.onsets, self.onsets[1:])):
            raise ValueError("onsets must be strictly increasing")
        return self

    @property
    def clip_length(self) -> int:
        return len(self.clips[0])

    def replace(self, samples: List[np.ndarray]) -> "ChirpClipSet":
        return ChirpClipSet(
            clips=[c.with_samples(s) for c, s in zip(self.clips, samples)],
            onsets=list(self.onsets),
        )


class FaceEcho(BaseModel):
    """Concatenated face echoes and the search history that placed them."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    echo: Waveform
    per_clip_position: int = Field(..., ge=0)
    position_std_history: List[Tuple[float, float]] = Field(default_factory=list)


class Spectrogram(BaseModel):
    """F x T magnitude grid, entries >= 0."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    magnitudes: np.ndarray
    freq_resolution: float = Field(..., gt=0, description="Hz per bin")
    time_resolution: int = Field(..., gt=0, description="Samples per frame step")

    @field_validator("magnitudes")
    @classmethod
    def check_magnitudes(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("spectrogram entries must be finite and non-negative")
        return v

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.magnitudes.shape)
