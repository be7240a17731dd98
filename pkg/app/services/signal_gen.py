"""
Probe Signal Generator Service

This module builds the emitted probe signal:
1. Linear chirps for the three sweep groups (12-17, 14-19, 16-21 kHz)
2. Hamming windowing of each chirp
3. The 11.025 kHz pilot tone burst used for synchronisation
4. Assembly into [pilot][gap][chirp 1][gap]...[chirp 9][tail]
5. 16-bit PCM WAV persistence
"""

import io
import logging
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf
from pydantic import ValidationError
from scipy.signal import chirp as linear_sweep
from scipy.signal import get_window

from app.models.signal import ChirpSpec, ProbeSignalConfig, Waveform, WindowKind
from app.services.errors import InvalidInputError

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class SignalGenError(InvalidInputError):
    """Raised when a probe signal cannot be generated"""
    pass


class InvalidChirpSpecError(SignalGenError):
    """Raised when a chirp spec does not fit the sample rate"""
    pass


class InvalidProbeConfigError(SignalGenError):
    """Raised when the probe layout is inconsistent"""
    pass


class MalformedWavError(SignalGenError):
    """Raised when a WAV file cannot be decoded"""
    def __init__(self, path: Union[str, Path], reason: str):
        self.path = str(path)
        super().__init__(f"Malformed WAV file '{path}': {reason}")


# ============================================================================
# Waveform Builders
# ============================================================================

def generate_chirp(spec: ChirpSpec, sample_rate: int) -> Waveform:
    """
    Generate a linear frequency sweep.

    Instantaneous frequency rises linearly from f_start at the first sample
    to f_end at the last one.

    Args:
        spec: Sweep range, length and amplitude
        sample_rate: Sample rate in Hz

    Returns:
        Waveform of spec.duration_samples samples

    Raises:
        InvalidChirpSpecError: If the sweep reaches Nyquist
    """
    nyquist = sample_rate / 2
    if not 0 < spec.f_start < spec.f_end < nyquist:
        raise InvalidChirpSpecError(
            f"Sweep {spec.f_start}-{spec.f_end} Hz must lie strictly inside (0, {nyquist}) Hz"
        )

    n = spec.duration_samples
    t = np.arange(n) / sample_rate
    t_end = (n - 1) / sample_rate
    samples = spec.amplitude * linear_sweep(
        t, f0=spec.f_start, t1=t_end, f1=spec.f_end, method="linear", phi=-90
    )
    return Waveform(samples=samples, sample_rate=sample_rate)


def apply_window(w: Waveform, window: WindowKind) -> Waveform:
    """Multiply by a symmetric Hamming window (endpoints 0.08); `none` is the identity."""
    if window == WindowKind.NONE:
        return w
    taper = get_window("hamming", len(w), fftbins=False)
    return w.with_samples(w.samples * taper)


def generate_pilot(config: ProbeSignalConfig) -> Waveform:
    """
    Generate the pilot tone burst.

    The burst is a constant-amplitude sinusoid with a short raised-cosine
    fade at each edge. A full-length window would flatten the correlation
    peak the receiver locks onto.

    Raises:
        InvalidProbeConfigError: If the duration is zero or the tone is above Nyquist
    """
    fs = config.sample_rate
    n = config.pilot_duration_samples
    if n <= 0:
        raise InvalidProbeConfigError(f"pilot_duration_samples must be positive, got {n}")
    if config.pilot_freq >= fs / 2:
        raise InvalidProbeConfigError(
            f"pilot_freq {config.pilot_freq} Hz is not below Nyquist {fs / 2} Hz"
        )

    idx = np.arange(n)
    tone = config.pilot_amplitude * np.sin(2 * np.pi * config.pilot_freq * idx / fs)

    taper = min(config.pilot_taper_samples, n // 2)
    if taper > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(taper) + 1) / (taper + 1))
        tone[:taper] *= ramp
        tone[n - taper:] *= ramp[::-1]

    return Waveform(samples=tone, sample_rate=fs)


def chirp_templates(config: ProbeSignalConfig) -> list[Waveform]:
    """The nine windowed chirps exactly as they are emitted."""
    return [
        apply_window(generate_chirp(spec, config.sample_rate), config.window)
        for spec in config.chirp_specs
    ]


def assemble_probe_signal(config: ProbeSignalConfig) -> Waveform:
    """
    Lay the pilot and the nine chirps out on a silent timeline.

    Chirp k (0-based) starts at config.chirp_onset(k); total length is
    config.total_length.

    Raises:
        InvalidProbeConfigError: If the configuration violates its invariants
    """
    try:
        config = ProbeSignalConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise InvalidProbeConfigError(f"Invalid probe configuration: {e}") from e

    out = np.zeros(config.total_length, dtype=np.float64)
    pilot = generate_pilot(config)
    out[:len(pilot)] = pilot.samples

    for k, template in enumerate(chirp_templates(config)):
        onset = config.chirp_onset(k)
        out[onset:onset + len(template)] = template.samples

    logger.debug(
        "Assembled probe: %d samples, pilot %d, %d chirps",
        len(out), len(pilot), len(config.chirp_specs),
    )
    return Waveform(samples=out, sample_rate=config.sample_rate)


# ============================================================================
# WAV I/O
# ============================================================================

def write_wav(w: Waveform, path: Union[str, Path]) -> None:
    """
    Write a mono 16-bit PCM WAV file.

    Raises:
        SignalGenError: If samples fall outside [-1, 1]
        OSError: If the file cannot be written
    """
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak > 1.0:
        raise SignalGenError(f"Samples must lie in [-1, 1] for 16-bit PCM, peak is {peak:.4f}")

    # full scale 2**15, the scale soundfile reads PCM_16 back with
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), pcm, w.sample_rate, subtype="PCM_16", format="WAV")


def decode_wav(raw: bytes, source: Union[str, Path] = "<bytes>") -> Waveform:
    """
    Decode WAV bytes as a mono float64 waveform.

    Raises:
        MalformedWavError: If the bytes are not a complete, decodable mono WAV
    """
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(source, "missing RIFF/WAVE header")
    riff_size = int.from_bytes(raw[4:8], "little")
    if riff_size + 8 > len(raw):
        raise MalformedWavError(source, f"truncated: header announces {riff_size + 8} bytes, file has {len(raw)}")

    try:
        data, rate = sf.read(io.BytesIO(raw), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise MalformedWavError(source, str(e)) from e

    if data.shape[1] != 1:
        raise MalformedWavError(source, f"expected mono, got {data.shape[1]} channels")

    return Waveform(samples=data[:, 0], sample_rate=int(rate))


def read_wav(path: Union[str, Path]) -> Waveform:
    """
    Read a WAV file as a mono float64 waveform.

    Raises:
        MalformedWavError: If the file is missing or not a decodable mono WAV
    """
    path = Path(path)
    if not path.exists():
        raise MalformedWavError(path, "file does not exist")
    return decode_wav(path.read_bytes(), path)
