"""Shared fixtures: default probe, pipeline, tiny network and a small simulated dataset."""

from pathlib import Path

import numpy as np
import pytest

from app.models.channel import ChannelScenario, DeviceResponse, SimulationConfig
from app.models.network import ModelConfig
from app.models.signal import ProbeSignalConfig
from app.services.channel_sim import build_dataset, random_device_response
from app.services.config import load_config
from app.services.echo_pipeline import build_pipeline_config
from app.services.signal_gen import assemble_probe_signal
from app.services.trainer import train

SAMPLES = Path(__file__).resolve().parent.parent / "samples"
TINY_CONF = SAMPLES / "tiny.conf"


def make_scenario(
    direct_delay: int = 500,
    face_delay: int = 70,
    taps=(0.15,),
    background_delay: int = None,
    background_gain: float = 0.0,
    snr_db=None,
    device: DeviceResponse = None,
) -> ChannelScenario:
    """Hand-built capture geometry with a flat device by default."""
    return ChannelScenario(
        direct_path_delay=direct_delay,
        direct_path_gain=0.65,
        face_echo_delay=face_delay,
        face_impulse_response=list(taps),
        background_echo_delay=background_delay or face_delay + 230,
        background_gain=background_gain,
        noise_snr_db=snr_db,
        device_response=device or DeviceResponse(),
    )


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(
        image_size=16,
        vision_channels=(4, 8, 8),
        acoustic_channels=(4, 8, 8),
        attention_dim=8,
        hcam_grids=((2, 2), (2, 2), (1, 1)),
    )
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope="session")
def probe_config() -> ProbeSignalConfig:
    return ProbeSignalConfig()


@pytest.fixture(scope="session")
def probe(probe_config):
    return assemble_probe_signal(probe_config)


@pytest.fixture(scope="session")
def pipeline_cfg(probe_config):
    return build_pipeline_config(probe_config)


@pytest.fixture
def model_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return load_config(TINY_CONF)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, probe, tiny_config):
    """24 rows: 6 per class on two devices (one flat, one random curve)."""
    root = tmp_path_factory.mktemp("dataset")
    sim: SimulationConfig = tiny_config.sim
    devices = [DeviceResponse(device_id=0), random_device_response(1, sim, seed=0)]
    return build_dataset(6, devices, probe, sim, seed=0, out_dir=root)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, tiny_dataset, tiny_config):
    """A two-epoch run on tiny_dataset: (checkpoint path, epoch log path, TrainResult)."""
    out = tmp_path_factory.mktemp("run")
    ckpt, epochs = out / "model.m3fs", out / "epochs.jsonl"
    result = train(tiny_dataset, tiny_config, ckpt, epochs)
    return ckpt, epochs, result
