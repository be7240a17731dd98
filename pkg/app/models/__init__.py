"""
M3FAS Models Package
"""

from app.models.channel import (
    ChannelScenario,
    DeviceResponse,
    Label,
    ScenarioDescriptor,
    SimulationConfig,
    SurfaceKind,
    SurfaceModel,
    SyntheticSample,
)
from app.models.metrics import ConfusionCounts, EvaluationReport, MetricRow, RocCurve, ScoreSet
from app.models.network import BranchConfig, FusionStrategy, ModelConfig, Route
from app.models.pipeline import ChirpClipSet, FaceEcho, PipelineConfig, PipelineSettings, Spectrogram
from app.models.signal import ChirpSpec, ProbeSignalConfig, Waveform, WindowKind
from app.models.training import (
    CheckpointMeta,
    DatasetManifest,
    EpochLog,
    InferenceLog,
    InferenceResult,
    ManifestRow,
    Split,
    SplitMode,
    TrainConfig,
    TrainingMode,
)

__all__ = [
    "BranchConfig",
    "ChannelScenario",
    "CheckpointMeta",
    "ChirpClipSet",
    "ChirpSpec",
    "ConfusionCounts",
    "DatasetManifest",
    "DeviceResponse",
    "EpochLog",
    "EvaluationReport",
    "FaceEcho",
    "FusionStrategy",
    "InferenceLog",
    "InferenceResult",
    "Label",
    "ManifestRow",
    "MetricRow",
    "ModelConfig",
    "PipelineConfig",
    "PipelineSettings",
    "ProbeSignalConfig",
    "RocCurve",
    "Route",
    "ScenarioDescriptor",
    "ScoreSet",
    "SimulationConfig",
    "Spectrogram",
    "Split",
    "SplitMode",
    "SurfaceKind",
    "SurfaceModel",
    "SyntheticSample",
    "TrainConfig",
    "TrainingMode",
    "Waveform",
    "WindowKind",
]
