"""
Synthetic Channel Simulator Service

This module stands in for a recorded dataset:
1. Impulse responses for live faces (multi-tap relief) and flat spoof media
2. simulate_recording: probe through direct path, face echo, background
   echo, band-limited noise and a per-device gain curve
3. synth_face_image: shaded face textures with print/replay artefacts
4. build_dataset: labelled PNG/WAV pairs plus manifest.tsv
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy.fft import irfft, next_fast_len, rfft, rfftfreq

from app.models.channel import (
    ChannelScenario,
    DeviceResponse,
    Label,
    ScenarioDescriptor,
    SimulationConfig,
    SurfaceKind,
    SurfaceModel,
    label_for_surface,
)
from app.models.signal import Waveform
from app.models.training import MANIFEST_COLUMNS, DatasetManifest, ManifestRow
from app.services.errors import InvalidInputError
from app.services.signal_gen import write_wav

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class ChannelSimError(InvalidInputError):
    """Raised when a scenario cannot be simulated"""
    pass


class DelayOverflowError(ChannelSimError):
    """Raised when the delayed probe does not fit in the recording"""
    def __init__(self, needed: int, length: int):
        self.needed = needed
        self.length = length
        super().__init__(f"Delayed probe needs {needed} samples, recording length is {length}")


# ============================================================================
# Acoustic channel
# ============================================================================

def device_gain_curve(device: DeviceResponse, n_fft: int, sample_rate: int) -> np.ndarray:
    """Real, zero-phase gain per rfft bin; flat outside the knot range."""
    freqs = rfftfreq(n_fft, d=1.0 / sample_rate)
    if device.is_flat:
        return np.ones_like(freqs)
    return np.interp(freqs, device.knots_hz, device.gains)


def random_device_response(device_id: int, sim: SimulationConfig, seed: int) -> DeviceResponse:
    """Smooth random gain curve over the sensing band, fixed by (seed, device_id)."""
    rng = np.random.default_rng([seed, device_id, 0xD1CE])
    knots = np.arange(sim.band_low_hz, sim.band_high_hz + 1.0, sim.device_knot_spacing_hz)
    lo, hi = sim.device_gain_range
    gains = rng.uniform(lo, hi, size=knots.shape[0])
    return DeviceResponse(device_id=device_id, knots_hz=knots.tolist(), gains=gains.tolist())


def channel_impulse_response(scenario: ChannelScenario) -> np.ndarray:
    """Direct tap, face response at its delay and the background tap, all after direct_path_delay."""
    d = scenario.direct_path_delay
    h = np.zeros(scenario.max_delay + 1, dtype=np.float64)
    h[d] += scenario.direct_path_gain
    face = np.asarray(scenario.face_impulse_response, dtype=np.float64)
    start = d + scenario.face_echo_delay
    h[start:start + face.shape[0]] += face
    h[d + scenario.background_echo_delay] += scenario.background_gain
    return h


def band_power(x: np.ndarray, sample_rate: int, band: Tuple[float, float]) -> float:
    """Mean power of x restricted to the band, via Parseval."""
    spectrum = rfft(x)
    freqs = rfftfreq(x.shape[0], d=1.0 / sample_rate)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    weights = np.where((freqs == 0) | (freqs == sample_rate / 2), 1.0, 2.0)
    return float(np.sum(weights[mask] * np.abs(spectrum[mask]) ** 2) / x.shape[0] ** 2)


def band_limited_noise(
    n: int,
    power: float,
    sample_rate: int,
    band: Tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian noise confined to the band and scaled to the given mean power."""
    spectrum = rfft(rng.standard_normal(n))
    freqs = rfftfreq(n, d=1.0 / sample_rate)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    noise = irfft(spectrum, n=n)
    current = float(np.mean(noise ** 2))
    if current == 0.0:
        return noise
    return noise * np.sqrt(power / current)


def simulate_recording(
    probe: Waveform,
    scenario: ChannelScenario,
    seed: int,
    length: Optional[int] = None,
    band: Tuple[float, float] = (10000.0, 22000.0),
) -> Waveform:
    """
    Simulate what the microphone captures while the probe plays.

    output = device(probe * h) + noise, where h holds the direct tap, the
    face impulse response and the background tap, and noise is Gaussian
    restricted to `band` at scenario.noise_snr_db below the clean band power.

    Args:
        probe: Emitted signal
        scenario: Channel geometry, gains, noise and device curve
        seed: Noise seed; the output is a pure function of its arguments
        length: Recording length, defaults to the probe length
        band: Sensing band used for the noise and the SNR definition

    Returns:
        Recorded waveform

    Raises:
        DelayOverflowError: If the delayed probe runs past the recording end
    """
    fs = probe.sample_rate
    length = len(probe) if length is None else length
    nonzero = np.flatnonzero(probe.samples)
    content_end = int(nonzero[-1]) + 1 if nonzero.size else 0
    needed = content_end + scenario.max_delay
    if needed > length:
        raise DelayOverflowError(needed, length)

    h = channel_impulse_response(scenario)
    clean = np.convolve(probe.samples, h)[:length]
    if clean.shape[0] < length:
        clean = np.pad(clean, (0, length - clean.shape[0]))

    if not scenario.device_response.is_flat:
        n_fft = next_fast_len(length + 512, real=True)
        gain = device_gain_curve(scenario.device_response, n_fft, fs)
        clean = irfft(rfft(clean, n=n_fft) * gain, n=n_fft)[:length]

    if scenario.noiseless:
        return Waveform(samples=clean, sample_rate=fs)

    rng = np.random.default_rng(seed)
    signal_power = band_power(clean, fs, band)
    noise_power = signal_power / 10 ** (scenario.noise_snr_db / 10)
    noise = band_limited_noise(length, noise_power, fs, band, rng)
    return Waveform(samples=clean + noise, sample_rate=fs)


# ============================================================================
# Surfaces
# ============================================================================

# (offset range, relative amplitude range) of the relief taps behind the nose tip
_RELIEF_TAPS = (
    ((18, 24), (0.3, 0.6)),
    ((32, 40), (0.2, 0.5)),
    ((46, 58), (0.15, 0.4)),
)


def random_face_geometry(rng: np.random.Generator) -> List[float]:
    """Ellipse semi-axes then (offset, amplitude) for each relief tap."""
    params = [float(rng.uniform(0.55, 0.7)), float(rng.uniform(0.7, 0.85))]
    for (o_lo, o_hi), (a_lo, a_hi) in _RELIEF_TAPS:
        params += [float(rng.integers(o_lo, o_hi + 1)), float(rng.uniform(a_lo, a_hi))]
    return params


def surface_impulse_response(model: SurfaceModel, gain: float, rng: np.random.Generator) -> List[float]:
    """
    Normalised reflection of the presented surface, scaled by gain.

    Live faces reflect from several depths; print and replay media are flat
    and return at most two taps above 10% of the peak.
    """
    if model.kind == SurfaceKind.LIVE_FACE:
        relief = model.geometry_params[2:] if len(model.geometry_params) >= 8 else random_face_geometry(rng)[2:]
        taps = [1.0]
        for offset, amp in zip(relief[0::2], relief[1::2]):
            offset = int(offset)
            taps += [0.0] * (offset - len(taps)) + [amp]
    elif model.kind == SurfaceKind.PRINT_ATTACK:
        taps = [1.0]
        if rng.random() < 0.5:
            offset = int(rng.integers(2, 7))
            taps += [0.0] * (offset - 1) + [float(rng.uniform(0.1, 0.3))]
    else:
        diffuse = rng.uniform(0.0, 0.045, size=int(rng.integers(4, 16)))
        diffuse *= rng.choice([-1.0, 1.0], size=diffuse.shape[0])
        taps = [1.0] + diffuse.tolist()
    return [gain * t for t in taps[:60]]


def echo_delay_samples(distance_cm: float, sim: SimulationConfig, sample_rate: int) -> int:
    """Extra path of the face echo over the direct speaker-to-microphone path."""
    extra_m = 2 * distance_cm / 100.0 - sim.speaker_mic_offset_m
    return max(1, int(round(extra_m / sim.speed_of_sound * sample_rate)))


def random_scenario(
    surface: SurfaceModel,
    device: DeviceResponse,
    sim: SimulationConfig,
    sample_rate: int,
    rng: np.random.Generator,
    subject: int = 0,
) -> ScenarioDescriptor:
    """
    Draw one capture.

    Gains keep the direct path above the summed face and background taps,
    which keeps the direct path the dominant correlation peak. A turned head
    returns less energy: the face gain falls with the cosine of the yaw.
    """
    distance = float(rng.choice(sim.distances_cm))
    pose = float(rng.choice(sim.head_poses_deg))
    face_delay = echo_delay_samples(distance, sim, sample_rate) + int(rng.integers(-2, 3))
    face_gain = float(rng.uniform(0.1, 0.18)) * float(np.cos(np.radians(pose)))
    snr_idx = int(rng.integers(0, len(sim.snr_db_choices)))
    channel = ChannelScenario(
        direct_path_delay=int(rng.integers(200, 2001)),
        direct_path_gain=float(rng.uniform(0.6, 0.7)),
        face_echo_delay=face_delay,
        face_impulse_response=surface_impulse_response(surface, face_gain, rng),
        background_echo_delay=face_delay + int(rng.integers(190, 271)),
        background_gain=min(float(rng.uniform(0.02, 0.08)), 0.8 * face_gain),
        noise_snr_db=sim.snr_db_choices[snr_idx],
        device_response=device,
    )
    return ScenarioDescriptor(
        subject=subject,
        surface=surface.kind,
        distance_cm=distance,
        head_pose_deg=pose,
        channel=channel,
    )


# ============================================================================
# Face images
# ============================================================================

def _render_face(model: SurfaceModel, rng: np.random.Generator, size: int, pose_deg: float = 0.0) -> np.ndarray:
    params = model.geometry_params if len(model.geometry_params) >= 2 else [0.62, 0.78]
    yaw = np.radians(pose_deg)
    ax, ay = params[0] * np.cos(yaw), params[1]
    tone = np.asarray(model.skin_tone, dtype=np.float64)

    y, x = np.mgrid[-1:1:complex(size), -1:1:complex(size)]
    x = x - rng.uniform(-0.05, 0.05) - 0.5 * params[0] * np.sin(yaw)
    y = y - rng.uniform(-0.05, 0.05)
    r2 = (x / ax) ** 2 + (y / ay) ** 2
    inside = r2 < 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))

    normal = np.stack([x / ax ** 2, y / ay ** 2, np.maximum(z, 1e-6)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    light = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.5, 0.1), 1.0])
    light /= np.linalg.norm(light)
    shade = 0.35 + 0.65 * np.clip(normal @ light, 0.0, 1.0)

    backdrop = rng.uniform(0.2, 0.6) + 0.1 * y
    img = np.where(inside[..., None], tone * shade[..., None], backdrop[..., None])
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_face_image(model: SurfaceModel, seed: int, size: int = 128, pose_deg: float = 0.0) -> np.ndarray:
    """
    Render a face image in [0, 1], shape (size, size, 3), RGB.

    A non-zero pose_deg turns the face: the outline narrows and its centre
    slides sideways.

    Live faces are a shaded ellipsoid; prints add desaturation and halftone
    dots; replays add a moire beat between two screen gratings.
    """
    rng = np.random.default_rng(seed)
    img = _render_face(model, rng, size, pose_deg)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    if model.kind == SurfaceKind.PRINT_ATTACK:
        gray = img.mean(axis=-1, keepdims=True)
        img = 0.6 * img + 0.4 * gray
        period = rng.uniform(2.5, 3.5)
        dots = 0.5 + 0.5 * np.cos(2 * np.pi * xx / period) * np.cos(2 * np.pi * yy / period)
        img = img * (0.8 + 0.2 * dots[..., None]) + rng.normal(0.0, 0.03, size=img.shape)
    elif model.kind == SurfaceKind.REPLAY_ATTACK:
        theta = rng.uniform(0, np.pi)
        f1 = rng.uniform(0.30, 0.36)
        f2 = f1 + rng.uniform(0.02, 0.05)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = xx * np.cos(theta + 0.05) + yy * np.sin(theta + 0.05)
        moire = np.cos(2 * np.pi * f1 * u) * np.cos(2 * np.pi * f2 * v)
        img = img * (0.85 + 0.15 * moire[..., None])
        img = img * np.array([0.95, 1.0, 1.08]) + 0.04

    return np.clip(img, 0.0, 1.0)


DISTORTIONS = ("gaussian_blur", "white_noise", "pink_noise")


def check_distortion(kind: str) -> None:
    if kind not in DISTORTIONS:
        raise ChannelSimError(f"Unknown distortion '{kind}'; expected one of {', '.join(DISTORTIONS)}")


def distort_image(image: np.ndarray, kind: str, level: float, seed: int) -> np.ndarray:
    """
    Degrade an image for robustness evaluation.

    Args:
        image: HxWx3 in [0, 1]
        kind: gaussian_blur (level = sigma in pixels), white_noise or
            pink_noise (level = noise standard deviation)
        level: Distortion strength, 0 is the identity
        seed: Noise seed

    Raises:
        ChannelSimError: If kind is unknown
    """
    check_distortion(kind)
    if level <= 0:
        return image
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blur":
        out = cv2.GaussianBlur(image, (0, 0), sigmaX=level, sigmaY=level)
    elif kind == "white_noise":
        out = image + rng.normal(0.0, level, size=image.shape)
    else:
        h, w = image.shape[:2]
        spectrum = np.fft.fft2(rng.standard_normal((h, w)))
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        radius = np.sqrt(fx ** 2 + fy ** 2)
        radius[0, 0] = np.inf
        pink = np.real(np.fft.ifft2(spectrum / np.sqrt(radius)))
        pink = pink / (pink.std() + 1e-12) * level
        out = image + pink[..., None]
    return np.clip(out, 0.0, 1.0)


def write_png(image: np.ndarray, path: Union[str, Path]) -> None:
    """Store an RGB [0, 1] image as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
        raise OSError(f"Failed to write image {path}")


def read_png(path: Union[str, Path]) -> np.ndarray:
    """Load a PNG as RGB float64 in [0, 1]."""
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise ChannelSimError(f"Cannot decode image {path}")
    return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def decode_png(raw: bytes) -> np.ndarray:
    """Decode PNG bytes as RGB float64 in [0, 1]."""
    pixels = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_COLOR)
    if pixels is None:
        raise ChannelSimError("Cannot decode image bytes")
    return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


# ============================================================================
# Dataset generation
# ============================================================================

class _Subject:
    """Fixed relief and skin tone of one synthetic person."""

    def __init__(self, subject_id: int, seed: int):
        rng = np.random.default_rng([seed, subject_id, 0x5EB1])
        self.subject_id = subject_id
        self.geometry = random_face_geometry(rng)
        self.skin_tone = (
            float(rng.uniform(0.55, 0.95)),
            float(rng.uniform(0.4, 0.75)),
            float(rng.uniform(0.3, 0.6)),
        )

    def surface(self, kind: SurfaceKind) -> SurfaceModel:
        return SurfaceModel(kind=kind, geometry_params=self.geometry, skin_tone=self.skin_tone)


def _attack_kind(index: int) -> SurfaceKind:
    return SurfaceKind.PRINT_ATTACK if index % 2 == 0 else SurfaceKind.REPLAY_ATTACK


def build_dataset(
    n_per_class: int,
    devices: Sequence[DeviceResponse],
    probe: Waveform,
    sim: SimulationConfig,
    seed: int,
    out_dir: Union[str, Path],
) -> DatasetManifest:
    """
    Generate n_per_class bonafide and n_per_class attack samples per device.

    Attacks alternate between print and replay. Each row gets its own child
    seed, so the result depends only on the arguments. Samples are generated
    on a thread pool and the manifest is written once, in row order.

    Args:
        n_per_class: Samples per (class, device)
        devices: One gain curve per device
        probe: Emitted probe signal
        sim: Generator settings
        seed: Dataset seed
        out_dir: Dataset root; receives images/, audio/ and manifest.tsv

    Returns:
        DatasetManifest with split unassigned

    Raises:
        ChannelSimError: If n_per_class < 1 or no device is given
    """
    if n_per_class < 1:
        raise ChannelSimError(f"n_per_class must be >= 1, got {n_per_class}")
    if not devices:
        raise ChannelSimError("at least one device response is required")

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "audio").mkdir(parents=True, exist_ok=True)

    subjects = [_Subject(s, seed) for s in range(sim.n_subjects)]
    jobs = []
    for device in devices:
        for label in (Label.BONAFIDE, Label.ATTACK):
            for i in range(n_per_class):
                kind = SurfaceKind.LIVE_FACE if label == Label.BONAFIDE else _attack_kind(i)
                jobs.append((device, kind, subjects[i % len(subjects)]))
    child_seeds = np.random.SeedSequence(seed).spawn(len(jobs))

    def generate(index: int) -> ManifestRow:
        device, kind, subject = jobs[index]
        rng = np.random.default_rng(child_seeds[index])
        surface = subject.surface(kind)
        scenario = random_scenario(surface, device, sim, probe.sample_rate, rng, subject.subject_id)
        noise_seed = int(rng.integers(0, 2 ** 31 - 1))
        recording = simulate_recording(probe, scenario.channel, noise_seed)
        peak = float(np.max(np.abs(recording.samples)))
        if peak > 1.0:
            logger.debug("Sample %d clipped at the microphone (peak %.3f)", index, peak)
            recording = recording.with_samples(np.clip(recording.samples, -1.0, 1.0))
        image = synth_face_image(
            surface, int(rng.integers(0, 2 ** 31 - 1)), size=sim.image_size, pose_deg=scenario.head_pose_deg
        )

        row_id = f"s{index:06d}"
        image_path = f"images/{row_id}.png"
        wav_path = f"audio/{row_id}.wav"
        write_png(image, root / image_path)
        write_wav(recording, root / wav_path)
        return ManifestRow(
            id=row_id,
            label=label_for_surface(kind),
            device=device.device_id,
            image_path=image_path,
            wav_path=wav_path,
            scenario=scenario,
        )

    with ThreadPoolExecutor(max_workers=sim.workers) as pool:
        rows = list(pool.map(generate, range(len(jobs))))

    manifest = DatasetManifest(root=root, rows=rows)
    write_manifest(manifest)
    logger.info("Generated %d samples for %d device(s) in %s", len(rows), len(devices), root)
    return manifest


def write_manifest(manifest: DatasetManifest) -> Path:
    """Write <root>/manifest.tsv in row order."""
    path = manifest.root / "manifest.tsv"
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for row in manifest.rows:
        fields = [
            row.id,
            str(int(row.label)),
            str(row.device),
            row.image_path,
            row.wav_path,
            row.scenario.model_dump_json(),
        ]
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n")
    return path
