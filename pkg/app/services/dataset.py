"""
Dataset Ingestion Service

This module reads a generated dataset back for training and evaluation:
1. load_manifest: manifest.tsv to DatasetManifest, checking the files exist
2. assign_splits: train/val/test under the configured protocol
3. extract_features: images and recordings to network inputs, on a thread pool
"""

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple, Union

import cv2
import numpy as np
from pydantic import ValidationError

from app.models.channel import ScenarioDescriptor
from app.models.network import ModelConfig
from app.models.pipeline import PipelineConfig
from app.models.training import (
    MANIFEST_COLUMNS,
    DatasetManifest,
    HeldoutVariable,
    ManifestRow,
    Split,
    SplitMode,
    TrainConfig,
)
from app.services.channel_sim import distort_image, read_png
from app.services.echo_pipeline import preprocess
from app.services.errors import InvalidInputError
from app.services.signal_gen import read_wav

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class DatasetError(InvalidInputError):
    """Raised when a dataset cannot be read or split"""
    pass


class ManifestFormatError(DatasetError):
    """Raised when manifest.tsv is malformed"""
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"manifest.tsv line {line_no}: {reason}")


class MissingSampleFileError(DatasetError):
    """Raised when a manifest row points at a file that does not exist"""
    def __init__(self, row_id: str, path: Path):
        self.row_id = row_id
        super().__init__(f"Row '{row_id}' references missing file {path}")


class EmptySplitError(DatasetError):
    """Raised when a split needed by an operation has no rows"""
    def __init__(self, split: str, detail: str = ""):
        self.split = split
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"Split '{split}' is empty{suffix}")


# ============================================================================
# Manifest
# ============================================================================

def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    """
    Read <root>/manifest.tsv.

    Raises:
        DatasetError: If the manifest is missing
        ManifestFormatError: If a line does not parse
        MissingSampleFileError: If an image or recording is missing
    """
    root = Path(root)
    path = root / "manifest.tsv"
    if not path.exists():
        raise DatasetError(f"No manifest.tsv in {root}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise ManifestFormatError(1, f"header must be {'/'.join(MANIFEST_COLUMNS)}")

    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ManifestFormatError(line_no, f"expected {len(MANIFEST_COLUMNS)} columns, got {len(fields)}")
        row_id, label, device, image_path, wav_path, scenario_json = fields
        try:
            row = ManifestRow(
                id=row_id,
                label=int(label),
                device=int(device),
                image_path=image_path,
                wav_path=wav_path,
                scenario=ScenarioDescriptor.model_validate(json.loads(scenario_json)),
            )
        except (ValueError, ValidationError) as e:
            raise ManifestFormatError(line_no, str(e)) from e
        for rel in (row.image_path, row.wav_path):
            if not (root / rel).exists():
                raise MissingSampleFileError(row.id, root / rel)
        rows.append(row)

    logger.info("Loaded manifest with %d rows from %s", len(rows), root)
    return DatasetManifest(root=root, rows=rows)


# ============================================================================
# Splits
# ============================================================================

def _carve_validation(indices: np.ndarray, labels: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Split indices into (train, val) by split_ratios, per label so both classes reach validation."""
    train_r, val_r, _ = cfg.split_ratios
    side = train_r + val_r
    train, val = [], []
    for label in (0, 1):
        shuffled = rng.permutation(indices[labels[indices] == label])
        n_val = int(round(len(shuffled) * val_r / side)) if side > 0 else 0
        train.append(shuffled[n_val:])
        val.append(shuffled[:n_val])
    return np.concatenate(train), np.concatenate(val)


def _test_subjects(rows: Sequence[ManifestRow], cfg: TrainConfig, rng: np.random.Generator) -> Set[int]:
    subjects = np.array(sorted({r.scenario.subject for r in rows}))
    if len(subjects) < 2:
        raise DatasetError(f"{cfg.split_mode.value} split needs at least two subjects")
    n_test = min(max(1, int(round(len(subjects) * cfg.split_ratios[2]))), len(subjects) - 1)
    return set(rng.permutation(subjects)[:n_test].tolist())


def _variable_value(row: ManifestRow, variable: HeldoutVariable) -> Optional[float]:
    if variable == HeldoutVariable.DISTANCE:
        return row.scenario.distance_cm
    if variable == HeldoutVariable.HEAD_POSE:
        return row.scenario.head_pose_deg
    return row.scenario.channel.noise_snr_db


def _held_out(value: Optional[float], target: Optional[float]) -> bool:
    if value is None or target is None:
        return value is target
    return abs(value - target) < 1e-9


def _protocol_masks(
    rows: Sequence[ManifestRow], cfg: TrainConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """(test, pool) masks of a held-out protocol; rows in neither stay unassigned."""
    if cfg.split_mode == SplitMode.CROSS_SUBJECT:
        test_subjects = _test_subjects(rows, cfg, rng)
        test = np.array([r.scenario.subject in test_subjects for r in rows], dtype=bool)
        return test, ~test

    if cfg.split_mode == SplitMode.CROSS_DEVICE:
        if not cfg.test_devices:
            raise DatasetError("cross_device split needs train.test_devices")
        unknown = set(cfg.test_devices) - {r.device for r in rows}
        if unknown:
            raise DatasetError(f"test devices {sorted(unknown)} do not occur in the dataset")
        test = np.array([r.device in cfg.test_devices for r in rows], dtype=bool)
        return test, ~test

    # cross_variable: one device, disjoint subjects, one value held out for test
    variable = cfg.heldout_variable
    if cfg.heldout_value is None and variable != HeldoutVariable.NOISE:
        raise DatasetError(f"cross_variable on {variable.value} needs train.heldout_value")
    devices = {r.device for r in rows}
    device = min(devices) if cfg.variable_device is None else cfg.variable_device
    if device not in devices:
        raise DatasetError(f"variable device {device} does not occur in the dataset")
    test_subjects = _test_subjects(rows, cfg, rng)

    on_device = np.array([r.device == device for r in rows], dtype=bool)
    # noise: heldout_value None selects the noiseless rows
    held = np.array([_held_out(_variable_value(r, variable), cfg.heldout_value) for r in rows], dtype=bool)
    tested = np.array([r.scenario.subject in test_subjects for r in rows], dtype=bool)
    return on_device & held & tested, on_device & ~held & ~tested


def assign_splits(manifest: DatasetManifest, cfg: TrainConfig) -> DatasetManifest:
    """
    Return a copy of manifest with every row's split set.

    random: rows are shuffled within each label and cut by split_ratios.
    The other modes pick the test rows by protocol (held-out subjects,
    devices, or one capture-variable value seen only on held-out subjects of
    one device) and carve a label-stratified validation set from the
    training pool. Rows outside both stay unassigned (split None).

    Raises:
        EmptySplitError: If the protocol leaves train or test empty
    """
    rows = manifest.rows
    rng = np.random.default_rng([cfg.seed, 0x5B17])
    indices = np.arange(len(rows))
    labels = np.array([int(r.label) for r in rows])
    split: List[Optional[Split]] = [None] * len(rows)

    if cfg.split_mode == SplitMode.RANDOM:
        for label in (0, 1):
            shuffled = rng.permutation(indices[labels == label])
            n_train = int(round(len(shuffled) * cfg.split_ratios[0]))
            n_val = int(round(len(shuffled) * cfg.split_ratios[1]))
            for rank, i in enumerate(shuffled):
                split[i] = Split.TRAIN if rank < n_train else Split.VAL if rank < n_train + n_val else Split.TEST
    else:
        test, pool = _protocol_masks(rows, cfg, rng)
        train_idx, val_idx = _carve_validation(indices[pool], labels, cfg, rng)
        for i in indices[test]:
            split[i] = Split.TEST
        for i in train_idx:
            split[i] = Split.TRAIN
        for i in val_idx:
            split[i] = Split.VAL

    assigned = [r.model_copy(update={"split": s}) for r, s in zip(rows, split)]
    result = DatasetManifest(root=manifest.root, rows=assigned)
    counts = {s.value: len(result.split_rows(s)) for s in Split}
    unassigned = len(rows) - sum(counts.values())
    logger.info("Split (%s): %s, %d unassigned", cfg.split_mode.value, counts, unassigned)
    if counts["train"] == 0:
        raise EmptySplitError("train", cfg.split_mode.value)
    if cfg.split_mode != SplitMode.RANDOM and counts["test"] == 0:
        raise EmptySplitError("test", cfg.split_mode.value)
    return result


# ============================================================================
# Features
# ============================================================================

@dataclass
class Features:
    """Network inputs for a list of rows; rows that failed extraction are absent."""
    ids: List[str]
    images: np.ndarray
    spectrograms: np.ndarray
    labels: np.ndarray
    devices: np.ndarray
    skipped: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index: np.ndarray) -> "Features":
        return Features(
            ids=[self.ids[i] for i in index],
            images=self.images[index],
            spectrograms=self.spectrograms[index],
            labels=self.labels[index],
            devices=self.devices[index],
        )


def prepare_image(image: np.ndarray, size: int) -> np.ndarray:
    """RGB HxWx3 in [0, 1] to a (3, size, size) network input."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"Expected an RGB image, got shape {image.shape}")
    if image.shape[:2] != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_AREA)
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float64)


def prepare_spectrogram(magnitudes: np.ndarray, model_cfg: ModelConfig) -> np.ndarray:
    """(F, T) spectrogram to a (1, F, T) network input."""
    if tuple(magnitudes.shape) != tuple(model_cfg.acoustic_shape):
        raise DatasetError(
            f"Spectrogram shape {magnitudes.shape} does not match model.acoustic_shape {model_cfg.acoustic_shape}"
        )
    return magnitudes[None, :, :].astype(np.float64)


def extract_features(
    manifest: DatasetManifest,
    rows: Sequence[ManifestRow],
    pipeline: PipelineConfig,
    model_cfg: ModelConfig,
    workers: int = 4,
    distortion: Optional[str] = None,
    distortion_level: float = 0.0,
) -> Features:
    """
    Load images and preprocess recordings for rows, in row order.

    A row whose recording fails preprocessing is logged and skipped.
    distortion, if given, is applied to the images only.

    Raises:
        EmptySplitError: If rows is empty or every row failed
    """
    if not rows:
        raise EmptySplitError("requested")

    def load(row: ManifestRow):
        try:
            image = read_png(manifest.root / row.image_path)
            if distortion:
                image = distort_image(image, distortion, distortion_level, seed=zlib.crc32(row.id.encode("utf-8")))
            spec = preprocess(read_wav(manifest.root / row.wav_path), pipeline)
            return prepare_image(image, model_cfg.image_size), prepare_spectrogram(spec.magnitudes, model_cfg)
        except InvalidInputError as e:
            logger.warning("Skipping row %s: %s", row.id, e)
            return None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        loaded = list(pool.map(load, rows))

    kept = [(r, x) for r, x in zip(rows, loaded) if x is not None]
    skipped = [r.id for r, x in zip(rows, loaded) if x is None]
    if not kept:
        raise EmptySplitError("requested", "every row failed preprocessing")
    return Features(
        ids=[r.id for r, _ in kept],
        images=np.stack([x[0] for _, x in kept]),
        spectrograms=np.stack([x[1] for _, x in kept]),
        labels=np.array([int(r.label) for r, _ in kept], dtype=np.float64),
        devices=np.array([r.device for r, _ in kept], dtype=np.int64),
        skipped=skipped,
    )
