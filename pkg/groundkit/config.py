"""Tool configuration: YAML file + flag overrides on top of dataclass defaults."""
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple
import copy
import hashlib
import json
import logging
import os

import yaml
from dotenv import load_dotenv

from groundkit.box_fusion import FusionConfig
from groundkit.errors import ConfigError, InputFileError, ValidationError
from groundkit.dataset_ingest import DEFAULT_NO_FINDING
from groundkit.knowledge_prompts import (
    DEFAULT_ATTRIBUTES,
    DEFAULT_DEFINITIONS,
    DEFAULT_DESCRIPTIONS,
    DEFAULT_KNOWLEDGE_TEMPLATE,
    DEFAULT_LABEL_TEMPLATE,
    LABEL_ONLY,
    PROMPT_MODES,
)
from groundkit.metrics_map import INTERPOLATIONS
from groundkit.metrics_rodeo import RodeoConfig
from groundkit.token_codec import CodecConfig

logger = logging.getLogger(__name__)

API_KEY_ENV = "GROUNDKIT_LLM_API_KEY"
BACKENDS = ("stub", "http")


@dataclass(frozen=True)
class MetricsConfig:
    interpolation: str = "101pt"
    rodeo: RodeoConfig = field(default_factory=RodeoConfig)

    def __post_init__(self):
        if self.interpolation not in INTERPOLATIONS:
            raise ValidationError(f"metrics.interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}")


@dataclass(frozen=True)
class PromptConfig:
    mode: str = LABEL_ONLY
    attributes: Tuple[str, ...] = DEFAULT_ATTRIBUTES
    backend: str = "stub"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    concurrency: int = 4
    label_template: str = DEFAULT_LABEL_TEMPLATE
    knowledge_template: str = DEFAULT_KNOWLEDGE_TEMPLATE
    definitions: str = str(DEFAULT_DEFINITIONS)
    descriptions: str = str(DEFAULT_DESCRIPTIONS)

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValidationError(f"prompts.mode must be one of {PROMPT_MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ValidationError(f"prompts.backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.max_retries < 0 or self.concurrency < 1:
            raise ValidationError("prompts.max_retries must be >= 0 and prompts.concurrency >= 1")
        if "{name}" not in self.label_template or "{name}" not in self.knowledge_template:
            raise ValidationError("prompt templates must contain {name}")
        if "{description}" not in self.knowledge_template:
            raise ValidationError("prompts.knowledge_template must contain {description}")


@dataclass(frozen=True)
class DatasetConfig:
    format: Optional[str] = None
    no_finding_labels: Tuple[str, ...] = DEFAULT_NO_FINDING
    train_ratio: float = 0.8
    seed: int = 0
    known_classes: Tuple[str, ...] = ()
    aliases: Dict[str, str] = field(default_factory=dict)
    max_reject_ratio: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.train_ratio <= 1.0:
            raise ValidationError(f"dataset.train_ratio must be in [0, 1], got {self.train_ratio}")
        if not 0.0 <= self.max_reject_ratio <= 1.0:
            raise ValidationError(f"dataset.max_reject_ratio must be in [0, 1], got {self.max_reject_ratio}")


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "out"
    cache: Optional[str] = None


@dataclass(frozen=True)
class ToolConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict:
        return json.loads(json.dumps(asdict(self)))

    def fingerprint(self) -> str:
        """SHA-256 of the canonical config; the paths section is excluded."""
        data = self.to_dict()
        data.pop("paths")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _merge(base: Dict, update: Mapping, prefix: str = "") -> Dict:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, Mapping) and key != "aliases":
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value
    return base


def _build(cls, data: Mapping, prefix: str = ""):
    kwargs = {}
    for f in fields(cls):
        value = data[f.name]
        if is_dataclass(f.type):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{prefix}{f.name} must be a mapping")
            value = _build(f.type, value, f"{prefix}{f.name}.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as e:
        raise ConfigError(str(e))


def set_dotted(overrides: Dict, key: str, value: Any) -> Dict:
    """Add 'section.field' = value to a nested override mapping."""
    node = overrides
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return overrides


def load_config(path=None, overrides: Optional[Mapping] = None) -> ToolConfig:
    """Defaults, then the YAML file, then the overrides (flags win)."""
    data = copy.deepcopy(asdict(ToolConfig()))
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except OSError as e:
            raise InputFileError(f"cannot read config {path}: {e}")
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}")
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(data, loaded)
        logger.debug("Loaded config from %s", path)
    if overrides:
        _merge(data, overrides)
    return _build(ToolConfig, data)


def api_key() -> Optional[str]:
    """LLM credential from the environment (or a .env file)."""
    load_dotenv()
    return os.getenv(API_KEY_ENV)
