"""Configuration for Medcap.

Values come from dataclass defaults, then an optional TOML file, then
environment variables, then CLI overrides (flags win).
"""

import copy
import dataclasses
import json
import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from medcap.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "MEDCAP_OUTPUT_DIR"
ENV_BACKEND_URL = "MEDCAP_BACKEND_URL"

DATASET_FORMATS = ("SLAKE_JSON", "RAD_JSON")
BACKBONES = ("resnet50", "resnet18", "small")
BACKEND_KINDS = ("stub", "http")
MODALITY_KEYS = ("CT", "MRI", "XRAY")


@dataclass
class DatasetSpec:
    """One VQA dataset file to load."""

    path: str
    format: str = "RAD_JSON"
    image_root: Optional[str] = None

    def __post_init__(self) -> None:
        if self.format not in DATASET_FORMATS:
            raise ConfigError(
                f"Unknown dataset format '{self.format}', expected one of {DATASET_FORMATS}",
                key="data.datasets.format",
            )


@dataclass
class DataConfig:
    image_size: int = 224
    datasets: list[DatasetSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive", key="data.image_size")


@dataclass
class ModelConfig:
    backbone: str = "resnet50"
    pretrained_weights: Optional[str] = None
    checkpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(
                f"Unknown backbone '{self.backbone}', expected one of {BACKBONES}",
                key="model.backbone",
            )


@dataclass
class AttentionConfig:
    """Hyperparameters of the modality attention block.

    The channel count is not configured here; it follows the backbone width.
    """

    reduction_ratio: int = 16
    anatomy_kernel: int = 7
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    scale_kernel: int = 3
    # Off trains plain FixMatch on pooled backbone features.
    enabled: bool = True

    def __post_init__(self) -> None:
        self.dilation_rates = tuple(self.dilation_rates)
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1", key="attention.reduction_ratio")
        if self.anatomy_kernel != 7:
            raise ConfigError("anatomy_kernel is fixed at 7", key="attention.anatomy_kernel")
        if sorted(self.dilation_rates) != [1, 2, 4]:
            raise ConfigError(
                "dilation_rates must be exactly 1, 2, 4", key="attention.dilation_rates"
            )
        if self.scale_kernel < 1 or self.scale_kernel % 2 == 0:
            raise ConfigError(
                "scale_kernel must be a positive odd integer", key="attention.scale_kernel"
            )


@dataclass
class SslConfig:
    """Semi-supervised training settings."""

    tau: float = 0.95
    lambda_u: float = 1.0
    class_weights: Optional[dict[str, float]] = None
    batch_size_labeled: int = 16
    batch_size_unlabeled: int = 32
    epochs: int = 20
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie strictly between 0 and 1", key="ssl.tau")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be non-negative", key="ssl.lambda_u")
        if self.class_weights is not None:
            for name, weight in self.class_weights.items():
                if name not in MODALITY_KEYS:
                    raise ConfigError(f"Unknown modality '{name}'", key="ssl.class_weights")
                if weight <= 0:
                    raise ConfigError(
                        f"class weight for {name} must be positive", key="ssl.class_weights"
                    )
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1", key="ssl.batch_size_labeled")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="ssl.epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)", key="ssl.val_fraction")


@dataclass
class AugmentParams:
    rotation_degrees: float = 0.0
    translate_fraction: float = 0.0
    intensity_jitter: float = 0.0
    flip_prob: float = 0.5


def _default_strong() -> dict[str, AugmentParams]:
    return {
        "CT": AugmentParams(rotation_degrees=10.0, translate_fraction=0.10, intensity_jitter=0.1),
        "MRI": AugmentParams(rotation_degrees=15.0, translate_fraction=0.15, intensity_jitter=0.1),
        "XRAY": AugmentParams(rotation_degrees=10.0, translate_fraction=0.10, intensity_jitter=0.1),
    }


@dataclass
class AugmentConfig:
    weak: AugmentParams = field(
        default_factory=lambda: AugmentParams(translate_fraction=0.05, flip_prob=0.5)
    )
    strong: dict[str, AugmentParams] = field(default_factory=_default_strong)

    def __post_init__(self) -> None:
        if self.weak.rotation_degrees != 0 or self.weak.intensity_jitter != 0:
            raise ConfigError(
                "weak augmentation allows only flips and translation", key="augment.weak"
            )
        if self.weak.translate_fraction > 0.05:
            raise ConfigError("weak translation is capped at 5%", key="augment.weak")
        for name in self.strong:
            if name not in MODALITY_KEYS:
                raise ConfigError(f"Unknown modality '{name}'", key="augment.strong")


@dataclass
class AnalyzerConfig:
    sim_threshold: float = 0.35
    top_k: int = 5
    embedding_dim: int = 64
    lexicon: Optional[str] = None
    extra_terms: Optional[str] = None


@dataclass
class PromptConfig:
    modality_template: str = "This is a {modality} image{body_part}."
    body_part_template: str = " of the {anatomy}"
    focus_template: str = "Focus on {anatomy}; assess {pathology}; question type: {question_type}."
    fallback_focus: str = "Describe clinically relevant findings."
    preamble: str = "Describe the medical image in the style of a radiology report.\n"
    separator: str = "\n"
    max_terms: int = 3


@dataclass
class BackendConfig:
    kind: str = "stub"
    endpoint: Optional[str] = None
    timeout_seconds: float = 30.0
    retries: int = 2
    max_inflight: int = 4
    max_tokens: int = 128
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Unknown backend kind '{self.kind}'", key="backend.kind")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1", key="backend.max_inflight")


@dataclass
class EvalWeights:
    """Combination weights for relevance, quality and the final score."""

    alpha1: float = 0.25
    alpha2: float = 0.25
    beta1: float = 1 / 3
    beta2: float = 1 / 3
    beta3: float = 1 / 3
    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(
                    f"{f.name} must be non-negative", key=f"evaluation.weights.{f.name}"
                )


@dataclass
class EvaluationConfig:
    weights: EvalWeights = field(default_factory=EvalWeights)
    density_cap: float = 0.3
    max_workers: int = 4

    def __post_init__(self) -> None:
        if self.density_cap <= 0:
            raise ConfigError("density_cap must be positive", key="evaluation.density_cap")


@dataclass
class AppConfig:
    seed: int = 0
    output_dir: str = "outputs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict[str, Any]:
        """JSON-compatible snapshot of every value."""
        return _jsonable(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> "AppConfig":
        """Copy with the run seed applied to every seeded component."""
        return dataclasses.replace(self, seed=seed, ssl=dataclasses.replace(self.ssl, seed=seed))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _deep_merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _convert(tp: Any, value: Any, key: str) -> Any:
    """Convert a raw TOML/JSON value to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, key)

    if dataclasses.is_dataclass(tp) and isinstance(tp, type):
        if not isinstance(value, Mapping):
            raise ConfigError(f"Expected a table for '{key}'", key=key)
        return _build(tp, value, key)

    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"Expected a list for '{key}'", key=key)
        return [_convert(args[0], v, f"{key}[{i}]") for i, v in enumerate(value)]

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"Expected a list for '{key}'", key=key)
        return tuple(_convert(args[0], v, key) for v in value)

    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(f"Expected a table for '{key}'", key=key)
        return {str(k): _convert(args[1], v, f"{key}.{k}") for k, v in value.items()}

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"Expected a boolean for '{key}'", key=key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Expected an integer for '{key}'", key=key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"Expected a number for '{key}'", key=key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"Expected a string for '{key}'", key=key)
        return value
    return value


def _build(cls: type, data: Mapping[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            dotted = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"Unknown configuration key '{dotted}'", key=dotted)
    kwargs = {}
    for name, value in data.items():
        dotted = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _convert(hints[name], value, dotted)
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> AppConfig:
    """Rebuild a configuration from a ``to_dict`` snapshot (e.g. a checkpoint)."""
    return _build(AppConfig, _deep_merge(AppConfig().to_dict(), data))


def parse_override(assignment: str) -> tuple[str, Any]:
    """Parse a ``dotted.key=value`` override; values are JSON when possible.

    Example:
        >>> parse_override("ssl.tau=0.9")
        ('ssl.tau', 0.9)
    """
    if "=" not in assignment:
        raise ConfigError(f"Override '{assignment}' must look like key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _nest(dotted: Mapping[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in dotted.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{key}' conflicts with a scalar value", key=key)
        node[parts[-1]] = value
    return nested


def load_config(
    path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
) -> AppConfig:
    """Load configuration from defaults, TOML file, environment, and overrides.

    Args:
        path: Optional TOML configuration file
        overrides: Dotted-key overrides, typically from CLI flags

    Returns:
        Validated application configuration

    Raises:
        ConfigError: If the file is missing or malformed, or a key is unknown
    """
    raw = AppConfig().to_dict()
    explicit_ssl_seed = bool(overrides and "ssl.seed" in overrides)

    if path is not None:
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", key="config")
        try:
            with open(path, "rb") as f:
                file_values = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}", key="config") from None
        raw = _deep_merge(raw, file_values)
        explicit_ssl_seed = explicit_ssl_seed or "seed" in file_values.get("ssl", {})
        logger.debug(f"Loaded configuration from {path}")

    env_values: dict[str, Any] = {}
    if os.getenv(ENV_OUTPUT_DIR):
        env_values["output_dir"] = os.getenv(ENV_OUTPUT_DIR)
    if os.getenv(ENV_BACKEND_URL):
        env_values["backend.endpoint"] = os.getenv(ENV_BACKEND_URL)
    raw = _deep_merge(raw, _nest(env_values))

    if overrides:
        raw = _deep_merge(raw, _nest(overrides))

    config = _build(AppConfig, raw)
    # An explicit ssl.seed is kept; otherwise the run seed drives training too.
    if not explicit_ssl_seed:
        config = config.with_seed(config.seed)
    return config
