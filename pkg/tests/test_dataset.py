"""Tests for manifest loading, split protocols and feature extraction."""

import shutil

import numpy as np
import pytest

from app.models.channel import Label, ScenarioDescriptor, SurfaceKind
from app.models.training import DatasetManifest, HeldoutVariable, ManifestRow, Split, SplitMode, TrainConfig
from app.services.dataset import (
    DatasetError,
    EmptySplitError,
    ManifestFormatError,
    MissingSampleFileError,
    assign_splits,
    extract_features,
    load_manifest,
    prepare_image,
    prepare_spectrogram,
)
from app.services.echo_pipeline import build_pipeline_config
from tests.conftest import make_scenario


@pytest.fixture
def manifest(tiny_dataset):
    return load_manifest(tiny_dataset.root)


def copy_dataset(src, dst):
    shutil.copytree(src, dst)
    return dst


# ============================================================================
# Manifest
# ============================================================================

def test_manifest_round_trip(manifest, tiny_dataset):
    assert len(manifest) == 24
    assert [r.id for r in manifest.rows] == [r.id for r in tiny_dataset.rows]
    assert [r.scenario for r in manifest.rows] == [r.scenario for r in tiny_dataset.rows]
    assert manifest.devices == [0, 1]


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)


def test_bad_header_and_columns(tmp_path, tiny_dataset):
    root = copy_dataset(tiny_dataset.root, tmp_path / "ds")
    path = root / "manifest.tsv"
    lines = path.read_text().splitlines()

    path.write_text("\n".join(["id\tlabel"] + lines[1:]) + "\n")
    with pytest.raises(ManifestFormatError) as info:
        load_manifest(root)
    assert info.value.line_no == 1

    path.write_text("\n".join(lines[:2] + ["s999999\t1\t0"]) + "\n")
    with pytest.raises(ManifestFormatError) as info:
        load_manifest(root)
    assert info.value.line_no == 3


def test_missing_sample_file(tmp_path, tiny_dataset):
    root = copy_dataset(tiny_dataset.root, tmp_path / "ds")
    victim = tiny_dataset.rows[3]
    (root / victim.wav_path).unlink()
    with pytest.raises(MissingSampleFileError) as info:
        load_manifest(root)
    assert info.value.row_id == victim.id


# ============================================================================
# Splits
# ============================================================================

def test_random_split_is_stratified_and_deterministic(manifest):
    cfg = TrainConfig(split_ratios=(0.5, 0.25, 0.25), seed=3)
    a, b = assign_splits(manifest, cfg), assign_splits(manifest, cfg)
    assert [r.split for r in a.rows] == [r.split for r in b.rows]
    for split in Split:
        rows = a.split_rows(split)
        assert rows
        assert {int(r.label) for r in rows} == {0, 1}
    assert len(a.split_rows(Split.TRAIN)) == 12


def test_cross_subject_split_is_disjoint(manifest):
    split = assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_SUBJECT, split_ratios=(0.5, 0.25, 0.25)))
    test_subjects = {r.scenario.subject for r in split.split_rows(Split.TEST)}
    other = {r.scenario.subject for r in split.rows if r.split != Split.TEST}
    assert test_subjects and not test_subjects & other


def test_cross_device_split_holds_out_devices(manifest):
    split = assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_DEVICE, test_devices=[1]))
    assert {r.device for r in split.split_rows(Split.TEST)} == {1}
    assert all(r.device == 0 for r in split.rows if r.split != Split.TEST)
    with pytest.raises(DatasetError):
        assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_DEVICE, test_devices=[7]))
    with pytest.raises(DatasetError):
        assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_DEVICE))


def test_cross_device_validation_holds_both_classes(manifest):
    split = assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_DEVICE, test_devices=[1]))
    assert {int(r.label) for r in split.split_rows(Split.VAL)} == {0, 1}
    assert {int(r.label) for r in split.split_rows(Split.TRAIN)} == {0, 1}


def protocol_manifest(root) -> DatasetManifest:
    """One row per (device, subject, head pose, label); distance follows the pose."""
    rows = []
    for device in (0, 1):
        for subject in range(4):
            for pose, distance in zip((-10.0, 0.0, 10.0), (25.0, 35.0, 45.0)):
                for label in (Label.BONAFIDE, Label.ATTACK):
                    kind = SurfaceKind.LIVE_FACE if label == Label.BONAFIDE else SurfaceKind.PRINT_ATTACK
                    row_id = f"r{len(rows):03d}"
                    scenario = ScenarioDescriptor(
                        subject=subject,
                        surface=kind,
                        distance_cm=distance,
                        head_pose_deg=pose,
                        channel=make_scenario(),
                    )
                    rows.append(ManifestRow(
                        id=row_id,
                        label=label,
                        device=device,
                        image_path=f"images/{row_id}.png",
                        wav_path=f"audio/{row_id}.wav",
                        scenario=scenario,
                    ))
    return DatasetManifest(root=root, rows=rows)


def cross_variable(variable: HeldoutVariable, value, **kwargs) -> TrainConfig:
    return TrainConfig(split_mode=SplitMode.CROSS_VARIABLE, heldout_variable=variable, heldout_value=value, **kwargs)


def test_cross_variable_holds_out_a_head_pose(tmp_path):
    split = assign_splits(protocol_manifest(tmp_path), cross_variable(HeldoutVariable.HEAD_POSE, 10.0))
    test = split.split_rows(Split.TEST)
    side = split.split_rows(Split.TRAIN) + split.split_rows(Split.VAL)

    assert len(test) == 2
    assert len(side) == 12
    assert all(r.scenario.head_pose_deg == 10.0 for r in test)
    assert all(r.scenario.head_pose_deg != 10.0 for r in side)
    assert {r.device for r in test + side} == {0}
    assert not {r.scenario.subject for r in test} & {r.scenario.subject for r in side}
    assert {int(r.label) for r in test} == {0, 1}
    assert {int(r.label) for r in split.split_rows(Split.VAL)} == {0, 1}
    assert sum(r.split is None for r in split.rows) == 48 - 14


def test_cross_variable_split_on_distance(tmp_path):
    manifest = protocol_manifest(tmp_path)
    split = assign_splits(manifest, cross_variable(HeldoutVariable.DISTANCE, 35.0, variable_device=1))
    test = split.split_rows(Split.TEST)
    side = split.split_rows(Split.TRAIN) + split.split_rows(Split.VAL)
    assert test and all(r.scenario.distance_cm == 35.0 for r in test)
    assert all(r.scenario.distance_cm != 35.0 for r in side)
    assert {r.device for r in test + side} == {1}
    assert not {r.scenario.subject for r in test} & {r.scenario.subject for r in side}

    with pytest.raises(DatasetError):
        assign_splits(manifest, TrainConfig(split_mode=SplitMode.CROSS_VARIABLE))
    with pytest.raises(DatasetError):
        assign_splits(manifest, cross_variable(HeldoutVariable.DISTANCE, 35.0, variable_device=5))


def test_protocol_with_no_test_rows(manifest):
    cfg = TrainConfig(split_mode=SplitMode.CROSS_VARIABLE, heldout_value=999.0)
    with pytest.raises(EmptySplitError) as info:
        assign_splits(manifest, cfg)
    assert info.value.split == "test"


# ============================================================================
# Features
# ============================================================================

def test_prepare_image_and_spectrogram(model_cfg):
    image = np.random.default_rng(0).uniform(size=(64, 64, 3))
    x = prepare_image(image, 16)
    assert x.shape == (3, 16, 16)
    assert 0.0 <= x.min() and x.max() <= 1.0
    assert prepare_spectrogram(np.zeros((33, 30)), model_cfg).shape == (1, 33, 30)
    with pytest.raises(DatasetError):
        prepare_image(np.zeros((16, 16)), 16)
    with pytest.raises(DatasetError):
        prepare_spectrogram(np.zeros((33, 29)), model_cfg)


def test_extract_features(manifest, probe_config, model_cfg):
    pipeline = build_pipeline_config(probe_config)
    rows = manifest.rows[:6]
    features = extract_features(manifest, rows, pipeline, model_cfg, workers=2)
    kept = [r for r in rows if r.id not in features.skipped]
    n = len(kept)
    assert n + len(features.skipped) == 6
    assert features.ids == [r.id for r in kept]
    assert features.images.shape == (n, 3, 16, 16)
    assert features.spectrograms.shape == (n, 1, 33, 30)
    assert np.array_equal(features.labels, [int(r.label) for r in kept])

    again = extract_features(manifest, rows, pipeline, model_cfg, workers=1)
    assert again.ids == features.ids
    assert np.array_equal(features.spectrograms, again.spectrograms)

    picked = features.take(np.array([n - 1, 0]))
    assert picked.ids == [kept[-1].id, kept[0].id]


def test_distortion_changes_images_only(manifest, probe_config, model_cfg):
    pipeline = build_pipeline_config(probe_config)
    rows = manifest.rows[:2]
    clean = extract_features(manifest, rows, pipeline, model_cfg, workers=1)
    noisy = extract_features(manifest, rows, pipeline, model_cfg, 1, "white_noise", 0.2)
    assert not np.array_equal(clean.images, noisy.images)
    assert np.array_equal(clean.spectrograms, noisy.spectrograms)


def test_failed_rows_are_skipped(tmp_path, tiny_dataset, probe_config, model_cfg):
    root = copy_dataset(tiny_dataset.root, tmp_path / "ds")
    victim = tiny_dataset.rows[0]
    broken = root / victim.wav_path
    broken.write_bytes(broken.read_bytes()[:44])
    manifest = load_manifest(root)
    pipeline = build_pipeline_config(probe_config)
    features = extract_features(manifest, manifest.rows[:3], pipeline, model_cfg, workers=1)
    assert victim.id in features.skipped
    assert victim.id not in features.ids
    assert len(features) + len(features.skipped) == 3
    with pytest.raises(EmptySplitError):
        extract_features(manifest, [], pipeline, model_cfg)
