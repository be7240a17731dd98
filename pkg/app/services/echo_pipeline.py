"""
Echo Extraction Pipeline Service

This module turns a raw recording into the acoustic-branch spectrogram:
1. High-pass filtering (linear-phase FIR, delay compensated)
2. Pilot location by cross-correlation
3. Segmentation of the nine chirp clips from the known layout
4. Direct-path cancellation in every clip
5. Adaptive face-echo location (earliest qualified peak per clip, min-std window)
6. Face-echo extraction and STFT spectrogram
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import correlate, firwin, get_window, hilbert

from app.models.pipeline import (
    ChirpClipSet,
    FaceEcho,
    PipelineConfig,
    PipelineSettings,
    Spectrogram,
)
from app.models.signal import ProbeSignalConfig, Waveform
from app.services.errors import InvalidInputError
from app.services.signal_gen import chirp_templates, generate_pilot

logger = logging.getLogger(__name__)

# Lags either side of an envelope peak searched for the matched-filter maximum
REFINE_RADIUS = 1


# ============================================================================
# Custom Exceptions
# ============================================================================

class EchoPipelineError(InvalidInputError):
    """Raised when a recording cannot be turned into a spectrogram"""
    pass


class InvalidCutoffError(EchoPipelineError):
    """Raised when the high-pass cutoff is outside (0, Nyquist)"""
    pass


class TemplateTooLongError(EchoPipelineError):
    """Raised when a correlation template is longer than the signal"""
    pass


class NoPeakError(EchoPipelineError):
    """Raised when no usable correlation peak exists"""
    pass


class LowConfidenceError(NoPeakError):
    """Raised when the pilot peak is too weak to trust"""
    def __init__(self, index: int, confidence: float, minimum: float):
        self.index = index
        self.confidence = confidence
        super().__init__(
            f"Pilot peak at sample {index} has normalised correlation {confidence:.3f} "
            f"(minimum {minimum:.3f})"
        )


class RecordingTooShortError(EchoPipelineError):
    """Raised when the recording cannot hold the probe layout"""
    pass


class SegmentOutOfBoundsError(EchoPipelineError):
    """Raised when a clip or echo window falls outside its source"""
    pass


class EmptySearchSpanError(EchoPipelineError):
    """Raised when no echo window fits in the search span"""
    pass


class EchoTooShortError(EchoPipelineError):
    """Raised when the echo is shorter than one STFT frame"""
    pass


# ============================================================================
# Configuration
# ============================================================================

def build_pipeline_config(
    probe: ProbeSignalConfig,
    settings: PipelineSettings = PipelineSettings(),
) -> PipelineConfig:
    """Bind pipeline settings to the templates of a probe configuration."""
    return PipelineConfig(
        **settings.model_dump(),
        pilot_template=generate_pilot(probe),
        chirp_templates=chirp_templates(probe),
        gap_pilot_to_first_chirp=probe.gap_pilot_to_first_chirp,
        gap_between_chirps=probe.gap_between_chirps,
    )


def _check_rate(w: Waveform, cfg: PipelineConfig) -> None:
    if w.sample_rate != cfg.sample_rate:
        raise EchoPipelineError(
            f"Recording sample rate {w.sample_rate} Hz does not match the probe's {cfg.sample_rate} Hz"
        )


# ============================================================================
# Filtering and correlation
# ============================================================================

@lru_cache(maxsize=16)
def _highpass_taps(numtaps: int, cutoff: float, sample_rate: int) -> np.ndarray:
    taps = firwin(numtaps, cutoff, pass_zero=False, window="hamming", fs=sample_rate)
    taps.setflags(write=False)
    return taps


def highpass_filter(w: Waveform, cutoff: float, numtaps: int = 255) -> Waveform:
    """
    Linear-phase FIR high-pass.

    The (numtaps - 1) / 2 group delay is removed by slicing the full
    convolution, so output sample i lines up with input sample i.

    Raises:
        InvalidCutoffError: If cutoff is not inside (0, Nyquist)
    """
    nyquist = w.sample_rate / 2
    if not 0 < cutoff < nyquist:
        raise InvalidCutoffError(f"Cutoff {cutoff} Hz must lie inside (0, {nyquist}) Hz")

    taps = _highpass_taps(numtaps, float(cutoff), w.sample_rate)
    delay = (numtaps - 1) // 2
    full = np.convolve(w.samples, taps)
    return w.with_samples(full[delay:delay + len(w)])


def cross_correlate(signal: Waveform, template: Waveform) -> np.ndarray:
    """
    Valid-mode sliding dot product.

    out[i] = sum_j signal[i + j] * template[j], for i in
    [0, len(signal) - len(template)].

    Raises:
        TemplateTooLongError: If the template is longer than the signal
    """
    if len(template) > len(signal):
        raise TemplateTooLongError(
            f"Template of {len(template)} samples is longer than the signal ({len(signal)})"
        )
    return correlate(signal.samples, template.samples, mode="valid")


def _normalised_peak(x: np.ndarray, template: np.ndarray, index: int, value: float) -> float:
    segment = x[index:index + template.shape[0]]
    denom = np.linalg.norm(template) * np.linalg.norm(segment)
    return float(value / denom) if denom > 0 else 0.0


# ============================================================================
# Synchronisation and segmentation
# ============================================================================

def locate_pilot(rec: Waveform, cfg: PipelineConfig) -> int:
    """
    Sample index where the pilot's direct path starts.

    Raises:
        RecordingTooShortError: If the recording cannot hold the probe layout
        NoPeakError: If the recording is silent
        LowConfidenceError: If the best match is too weak to be the pilot
    """
    _check_rate(rec, cfg)
    if len(rec) < cfg.layout_length:
        raise RecordingTooShortError(
            f"Recording has {len(rec)} samples, the probe layout needs {cfg.layout_length}"
        )

    r = cross_correlate(rec, cfg.pilot_template)
    idx = int(np.argmax(r))
    if r[idx] <= 0:
        raise NoPeakError("No positive pilot correlation peak; is the recording silent?")

    confidence = _normalised_peak(rec.samples, cfg.pilot_template.samples, idx, float(r[idx]))
    if confidence < cfg.pilot_confidence:
        raise LowConfidenceError(idx, confidence, cfg.pilot_confidence)
    logger.debug("Pilot at sample %d (confidence %.3f)", idx, confidence)
    return idx


def segment_chirps(rec: Waveform, pilot_idx: int, cfg: PipelineConfig) -> ChirpClipSet:
    """
    Cut the nine clips using the fixed pilot-to-chirp gaps.

    Clip k starts at pilot_idx + cfg.chirp_offset(k) and holds the chirp
    plus the search span.

    Raises:
        SegmentOutOfBoundsError: If a clip falls outside the recording
    """
    length = cfg.clip_length
    onsets = [pilot_idx + cfg.chirp_offset(k) for k in range(9)]
    if pilot_idx < 0 or onsets[-1] + length > len(rec):
        raise SegmentOutOfBoundsError(
            f"Clip 9 spans [{onsets[-1]}, {onsets[-1] + length}) but the recording has {len(rec)} samples"
        )
    clips = [rec.with_samples(rec.samples[o:o + length].copy()) for o in onsets]
    return ChirpClipSet(clips=clips, onsets=onsets)


# ============================================================================
# Echo isolation
# ============================================================================

def remove_direct_path(clips: ChirpClipSet, cfg: PipelineConfig) -> ChirpClipSet:
    """
    Cancel the direct path in every clip.

    The chirp template, scaled by its least-squares gain at the strongest
    correlation peak, is subtracted over its span. The face and background
    echoes overlapping that span are kept.

    Raises:
        NoPeakError: If a clip has no direct-path peak
    """
    cleaned = []
    for k, (clip, template) in enumerate(zip(clips.clips, cfg.chirp_templates)):
        x = clip.samples.copy()
        t = template.samples
        r = cross_correlate(clip, template)
        p = int(np.argmax(r))
        confidence = _normalised_peak(x, t, p, float(r[p]))
        if r[p] <= 0 or confidence < cfg.direct_confidence:
            raise NoPeakError(
                f"Clip {k + 1}: direct-path peak confidence {confidence:.3f} "
                f"below {cfg.direct_confidence:.3f}"
            )
        x[p:p + t.shape[0]] -= (r[p] / np.dot(t, t)) * t
        cleaned.append(x)
    return clips.replace(cleaned)


def matched_outputs(clips: ChirpClipSet, cfg: PipelineConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Matched-filter output of each clip and its analytic envelope, both shape (9, lags)."""
    corr = np.stack([
        cross_correlate(clip, template) for clip, template in zip(clips.clips, cfg.chirp_templates)
    ])
    return corr, np.abs(hilbert(corr, axis=1))


def echo_envelopes(clips: ChirpClipSet, cfg: PipelineConfig) -> np.ndarray:
    """Analytic envelope of each clip's matched-filter output, shape (9, lags)."""
    return matched_outputs(clips, cfg)[1]


def _qualified_peaks(env: np.ndarray, guard: int, floor: float) -> np.ndarray:
    """Local maxima after the guard reaching floor * clip max."""
    left = np.full_like(env, -np.inf)
    left[:, 1:] = env[:, :-1]
    right = np.full_like(env, -np.inf)
    right[:, :-1] = env[:, 1:]
    is_peak = (env > left) & (env >= right)
    is_peak[:, :guard] = False

    ceiling = env[:, guard:].max(axis=1, keepdims=True)
    return is_peak & (env >= floor * ceiling) & (ceiling > 0)


def _next_qualified(qualified: np.ndarray) -> np.ndarray:
    """Lag of the first qualified peak at or after every lag; n_lags where none follows."""
    n_lags = qualified.shape[1]
    lags = np.where(qualified, np.arange(n_lags)[None, :], n_lags)
    return np.minimum.accumulate(lags[:, ::-1], axis=1)[:, ::-1]


def _refined_lags(corr: np.ndarray, radius: int = REFINE_RADIUS) -> np.ndarray:
    """For every lag, the lag of the largest matched-filter sample within +-radius."""
    padded = np.pad(corr, ((0, 0), (radius, radius)), constant_values=-np.inf)
    views = sliding_window_view(padded, 2 * radius + 1, axis=1)
    return views.argmax(axis=2) + np.arange(corr.shape[1])[None, :] - radius


def locate_face_echo_adaptive(
    clips: ChirpClipSet, cfg: PipelineConfig
) -> Tuple[int, List[Tuple[float, float]]]:
    """
    Find the face-echo position shared by the nine clips.

    A window of cfg.echo_window lags slides with stride 1 from
    cfg.direct_guard up to cfg.max_echo_lag, which ends the search before
    the background echo. Inside a window, each clip proposes its earliest
    envelope peak reaching cfg.peak_floor of the clip maximum, moved to the
    largest matched-filter sample within one lag; a window where some clip
    has no such peak is skipped. The window whose nine proposals have the
    smallest standard deviation wins (earliest on ties), and the position
    is the mean of its proposals rounded half-up.

    Args:
        clips: Clips with the direct path removed
        cfg: Pipeline configuration

    Returns:
        (position, history) where history holds (mean, std) for every
        window in scan order; skipped windows are (nan, inf)

    Raises:
        EmptySearchSpanError: If no window fits between the guard and max_echo_lag
        NoPeakError: If every window is skipped
    """
    corr, env = matched_outputs(clips, cfg)
    n_lags = min(env.shape[1], cfg.max_echo_lag)
    window, guard = cfg.echo_window, cfg.direct_guard
    if n_lags - window < guard:
        raise EmptySearchSpanError(
            f"Search span of {n_lags} lags leaves no {window}-lag window after the {guard}-lag guard"
        )
    corr, env = corr[:, :n_lags], env[:, :n_lags]

    starts = np.arange(guard, n_lags - window + 1)
    first = _next_qualified(_qualified_peaks(env, guard, cfg.peak_floor))[:, starts]
    valid = (first < starts[None, :] + window).all(axis=0)
    positions = np.take_along_axis(_refined_lags(corr), np.minimum(first, n_lags - 1), axis=1)

    means = np.where(valid, positions.mean(axis=0), np.nan)
    stds = np.where(valid, positions.std(axis=0), np.inf)
    history = list(zip(means.tolist(), stds.tolist()))

    if not valid.any():
        raise NoPeakError("No echo window holds a peak in all nine clips")
    chosen = int(np.argmin(stds))
    position = int(np.floor(means[chosen] + 0.5))
    logger.debug(
        "Face echo at lag %d (window %d, std %.3f)", position, starts[chosen], stds[chosen]
    )
    return position, history


def extract_face_echoes(
    clips: ChirpClipSet,
    position: int,
    cfg: PipelineConfig,
    history: List[Tuple[float, float]] = None,
) -> FaceEcho:
    """
    Concatenate clip[position:position + echo_window] over the nine clips.

    Raises:
        SegmentOutOfBoundsError: If the window leaves a clip
    """
    window = cfg.echo_window
    if position < 0 or position + window > clips.clip_length:
        raise SegmentOutOfBoundsError(
            f"Echo window [{position}, {position + window}) outside clips of {clips.clip_length} samples"
        )
    echo = np.concatenate([c.samples[position:position + window] for c in clips.clips])
    return FaceEcho(
        echo=clips.clips[0].with_samples(echo),
        per_clip_position=position,
        position_std_history=history or [],
    )


# ============================================================================
# Spectrogram
# ============================================================================

def stft_magnitude(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """|STFT| with a periodic Hann window and no padding, shape (window // 2 + 1, frames)."""
    frames = sliding_window_view(x, window)[::hop]
    taper = get_window("hann", window, fftbins=True)
    return np.abs(np.fft.rfft(frames * taper, axis=1)).T


def compute_spectrogram(echo: FaceEcho, cfg: PipelineSettings) -> Spectrogram:
    """
    log1p-compressed STFT magnitude, min-max normalised to [0, 1] per sample.

    A constant grid (for instance a silent echo) normalises to zeros.

    Raises:
        EchoTooShortError: If the echo is shorter than one frame
    """
    x = echo.echo.samples
    if x.shape[0] < cfg.stft_window:
        raise EchoTooShortError(
            f"Echo of {x.shape[0]} samples is shorter than the {cfg.stft_window}-sample STFT window"
        )

    mag = np.log1p(stft_magnitude(x, cfg.stft_window, cfg.stft_hop))
    lo, hi = mag.min(), mag.max()
    norm = (mag - lo) / (hi - lo) if hi > lo else np.zeros_like(mag)
    return Spectrogram(
        magnitudes=norm,
        freq_resolution=echo.echo.sample_rate / cfg.stft_window,
        time_resolution=cfg.stft_hop,
    )


# ============================================================================
# End-to-end
# ============================================================================

@dataclass
class PipelineTrace:
    """Intermediate results of one preprocess run."""
    filtered: Waveform
    pilot_index: int
    clips: ChirpClipSet
    cleaned: ChirpClipSet
    face_echo: FaceEcho
    spectrogram: Spectrogram


def trace_pipeline(rec: Waveform, cfg: PipelineConfig) -> PipelineTrace:
    """Run every stage in order and keep the intermediates."""
    _check_rate(rec, cfg)
    filtered = highpass_filter(rec, cfg.highpass_cutoff, cfg.fir_taps)
    pilot_index = locate_pilot(filtered, cfg)
    clips = segment_chirps(filtered, pilot_index, cfg)
    cleaned = remove_direct_path(clips, cfg)
    position, history = locate_face_echo_adaptive(cleaned, cfg)
    face_echo = extract_face_echoes(cleaned, position, cfg, history)
    return PipelineTrace(
        filtered=filtered,
        pilot_index=pilot_index,
        clips=clips,
        cleaned=cleaned,
        face_echo=face_echo,
        spectrogram=compute_spectrogram(face_echo, cfg),
    )


def preprocess(rec: Waveform, cfg: PipelineConfig) -> Spectrogram:
    """Recording to spectrogram; raises the first failing stage's error."""
    return trace_pipeline(rec, cfg).spectrogram
