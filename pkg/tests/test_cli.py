"""Tests for the command-line interface and its exit codes."""

import pytest
from typer.testing import CliRunner

from app.cli import app
from app.models.training import CheckpointMeta
from app.services.checkpoint import load_checkpoint
from app.services.dataset import load_manifest
from app.services.signal_gen import read_wav
from tests.conftest import TINY_CONF

runner = CliRunner()


@pytest.fixture
def sample(tiny_dataset):
    row = tiny_dataset.rows[0]
    return tiny_dataset.root / row.image_path, tiny_dataset.root / row.wav_path


def test_gen_signal(tmp_path):
    out = tmp_path / "probe.wav"
    result = runner.invoke(app, ["gen-signal", "--out", str(out)])
    assert result.exit_code == 0
    probe = read_wav(out)
    assert len(probe) == 51388
    assert probe.sample_rate == 44100


def test_invalid_config_exits_2(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("signal.no_such_key = 1\n")
    result = runner.invoke(app, ["gen-signal", "--out", str(tmp_path / "p.wav"), "--config", str(conf)])
    assert result.exit_code == 2
    assert not (tmp_path / "p.wav").exists()


def test_extract_saves_the_spectrogram(tmp_path, sample):
    out = tmp_path / "spec.m3fs"
    result = runner.invoke(app, ["extract", "--wav", str(sample[1]), "--out", str(out)])
    assert result.exit_code == 0
    meta, state = load_checkpoint(out)
    assert isinstance(meta, CheckpointMeta)
    assert state["spectrogram"].shape == (33, 30)


def test_extract_on_a_missing_file(tmp_path):
    result = runner.invoke(app, ["extract", "--wav", str(tmp_path / "absent.wav")])
    assert result.exit_code == 2


def test_infer_routes_and_exit_codes(trained, sample):
    ckpt = str(trained[0])
    image, wav = (str(p) for p in sample)

    result = runner.invoke(app, ["infer", "--ckpt", ckpt, "--route", "f", "--image", image, "--wav", wav])
    assert result.exit_code == 0
    heads = [line.split("\t")[0] for line in result.stdout.splitlines() if "\t" in line]
    assert sorted(heads) == ["acoustic", "fusion", "vision"]

    assert runner.invoke(app, ["infer", "--ckpt", ckpt, "--route", "x", "--image", image]).exit_code == 2
    assert runner.invoke(app, ["infer", "--ckpt", ckpt, "--route", "f", "--image", image]).exit_code == 3

    result = runner.invoke(app, ["infer", "--ckpt", ckpt, "--route", "f", "--image", image, "--fallback"])
    assert result.exit_code == 0
    assert "Fallback" in result.stdout


def test_eval_prints_the_report(trained, tiny_dataset, tmp_path):
    out = tmp_path / "report.tsv"
    result = runner.invoke(
        app, ["eval", "--ckpt", str(trained[0]), "--data", str(tiny_dataset.root), "--out", str(out)]
    )
    assert result.exit_code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 13
    assert lines[0].split("\t")[:2] == ["metric", "head"]


def test_simulate_and_train(tmp_path):
    data, ckpt = tmp_path / "data", tmp_path / "model.m3fs"
    result = runner.invoke(
        app,
        ["simulate", "--out", str(data), "--n", "10", "--devices", "1", "--config", str(TINY_CONF)],
    )
    assert result.exit_code == 0
    assert len(load_manifest(data)) == 20
    assert (data / "config.conf").exists()

    result = runner.invoke(app, ["train", "--data", str(data), "--out", str(ckpt), "--config", str(TINY_CONF)])
    assert result.exit_code == 0
    assert ckpt.exists()
