"""
Flat Configuration Service

Reads and writes the `key=value` configuration files used by every command.
Keys carry a section prefix (signal., pipeline., sim., model., train.);
lists are comma separated, grid sizes are written HxW and `none` is None.
Chirp specs are written through three derived keys:

    signal.chirp_bands = 12000-17000,14000-19000,16000-21000
    signal.chirp_duration_samples = 1764
    signal.chirp_amplitude = 0.5
"""

import logging
import re
import typing
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError

from app.models.channel import SimulationConfig
from app.models.network import ModelConfig
from app.models.pipeline import PipelineSettings
from app.models.signal import ChirpSpec, ProbeSignalConfig
from app.models.training import TrainConfig
from app.services.errors import InvalidInputError

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class ConfigError(InvalidInputError):
    """Raised when a configuration file or value is invalid"""
    pass


class UnknownConfigKeyError(ConfigError):
    """Raised for a key no section defines"""
    def __init__(self, key: str, line_no: Optional[int] = None):
        self.key = key
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"Unknown configuration key '{key}'{where}")


# ============================================================================
# AppConfig
# ============================================================================

class AppConfig(BaseModel):
    """Every configurable section."""
    signal: ProbeSignalConfig = Field(default_factory=ProbeSignalConfig)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    sim: SimulationConfig = Field(default_factory=SimulationConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


SECTIONS = ("signal", "pipeline", "sim", "model", "train")
CHIRP_KEYS = ("chirp_bands", "chirp_duration_samples", "chirp_amplitude")


# ============================================================================
# Parser
# ============================================================================

class ConfigParser:
    """
    Parser for flat configuration text.

    Blank lines and `#` comments are skipped; every other line must be
    `section.key = value`.
    """

    LINE_PATTERN = re.compile(r"^\s*([a-z_]+)\.([a-z0-9_]+)\s*=\s*(.*?)\s*$")

    @staticmethod
    def parse_lines(text: str) -> Dict[str, Dict[str, Tuple[str, int]]]:
        """Split text into {section: {key: (raw value, line number)}}."""
        sections: Dict[str, Dict[str, Tuple[str, int]]] = {s: {} for s in SECTIONS}
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            match = ConfigParser.LINE_PATTERN.match(stripped)
            if not match:
                raise ConfigError(f"Line {line_no}: expected 'section.key = value', got '{stripped}'")
            section, key, raw = match.groups()
            if section not in sections:
                raise UnknownConfigKeyError(f"{section}.{key}", line_no)
            if key in sections[section]:
                raise ConfigError(f"Line {line_no}: duplicate key '{section}.{key}'")
            sections[section][key] = (raw, line_no)
        return sections

    @staticmethod
    def parse_scalar(raw: str):
        """`none` is None; HxW is a pair; everything else stays a string for pydantic."""
        if raw.lower() == "none":
            return None
        if re.fullmatch(r"\d+x\d+", raw):
            h, w = raw.split("x")
            return [h, w]
        return raw

    @staticmethod
    def parse_value(raw: str, annotation) -> object:
        if _is_sequence(annotation):
            if raw == "":
                return []
            return [ConfigParser.parse_scalar(item.strip()) for item in raw.split(",")]
        return ConfigParser.parse_scalar(raw)

    @staticmethod
    def parse_chirp_specs(values: Dict[str, Tuple[str, int]]) -> List[ChirpSpec]:
        defaults = ProbeSignalConfig().chirp_specs
        bands_raw = values.get("chirp_bands")
        try:
            if bands_raw is None:
                bands = [(s.f_start, s.f_end) for s in defaults[:3]]
            else:
                bands = []
                for item in bands_raw[0].split(","):
                    lo, hi = item.strip().split("-")
                    bands.append((float(lo), float(hi)))
            duration = int(values.get("chirp_duration_samples", (defaults[0].duration_samples, 0))[0])
            amplitude = float(values.get("chirp_amplitude", (defaults[0].amplitude, 0))[0])
        except ValueError as e:
            raise ConfigError(f"Invalid chirp settings: {e}") from e
        try:
            group = [
                ChirpSpec(f_start=lo, f_end=hi, duration_samples=duration, amplitude=amplitude)
                for lo, hi in bands
            ]
        except ValidationError as e:
            raise ConfigError(f"Invalid chirp settings: {e}") from e
        return group * 3


def _is_sequence(annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin is Union:
        return any(_is_sequence(a) for a in typing.get_args(annotation) if a is not type(None))
    return origin in (list, tuple) or annotation in (list, tuple)


def _section_model(section: str):
    return AppConfig.model_fields[section].annotation


def parse_config(text: str) -> AppConfig:
    """
    Build an AppConfig from flat text; missing keys keep their defaults.

    Raises:
        ConfigError: On syntax errors, duplicate keys or invalid values
        UnknownConfigKeyError: On keys no section defines
    """
    sections = ConfigParser.parse_lines(text)
    built = {}
    for section in SECTIONS:
        model = _section_model(section)
        values = sections[section]
        data = {}
        if section == "signal" and any(k in values for k in CHIRP_KEYS):
            data["chirp_specs"] = ConfigParser.parse_chirp_specs(values)
        for key, (raw, line_no) in values.items():
            if section == "signal" and key in CHIRP_KEYS:
                continue
            if key not in model.model_fields or (section == "signal" and key == "chirp_specs"):
                raise UnknownConfigKeyError(f"{section}.{key}", line_no)
            data[key] = ConfigParser.parse_value(raw, model.model_fields[key].annotation)
        try:
            built[section] = model(**data)
        except ValidationError as e:
            raise ConfigError(f"Invalid '{section}' settings: {e}") from e
    return AppConfig(**built)


def load_config(path: Union[str, Path, None]) -> AppConfig:
    """Read a config file; None gives the defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config '{path}': {e}") from e
    config = parse_config(text)
    logger.info("Loaded configuration from %s", path)
    return config


# ============================================================================
# Writer
# ============================================================================

def _format_scalar(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return "x".join(_format_scalar(v) for v in value)
    return str(value)


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_scalar(v) for v in value)
    return _format_scalar(value)


def flatten_config(config: AppConfig) -> Dict[str, str]:
    """Flat {section.key: text} view, as written to files and checkpoints."""
    flat: Dict[str, str] = {}
    for section in SECTIONS:
        dumped = getattr(config, section).model_dump(mode="json")
        if section == "signal":
            specs = dumped.pop("chirp_specs")
            group = specs[:3]
            flat["signal.chirp_bands"] = ",".join(f"{s['f_start']}-{s['f_end']}" for s in group)
            flat["signal.chirp_duration_samples"] = str(group[0]["duration_samples"])
            flat["signal.chirp_amplitude"] = str(group[0]["amplitude"])
        for key, value in dumped.items():
            flat[f"{section}.{key}"] = _format_value(value)
    return flat


def dump_config(config: AppConfig) -> str:
    """Canonical text: one `key = value` line per key, sorted."""
    flat = flatten_config(config)
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


def config_from_flat(flat: Dict[str, str]) -> AppConfig:
    """Inverse of flatten_config."""
    return parse_config("".join(f"{k} = {v}\n" for k, v in flat.items()))
