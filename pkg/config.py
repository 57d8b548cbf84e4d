"""Configuration: training regimes, key=value experiment files and runtime settings."""

import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from models import ExperimentConfig, Variant

# Config-file section prefix -> attribute path inside ExperimentConfig.
SECTIONS: Dict[str, Tuple[str, ...]] = {
    "model": ("model",),
    "train": ("train",),
    "loss": ("train", "loss"),
    "sampler": ("train", "sampler"),
    "preprocess": ("preprocess",),
    "data": ("data",),
}

_NONE_VALUES = {"", "none", "null"}


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys and invalid values."""


class ArchitectureRegime(ABC):
    """Optimizer and decoder defaults of one backbone family."""

    @property
    @abstractmethod
    def learning_rate(self) -> float:
        pass

    @property
    @abstractmethod
    def weight_decay(self) -> float:
        pass

    @property
    @abstractmethod
    def batch_size(self) -> int:
        pass

    @property
    @abstractmethod
    def decoder_layers(self) -> int:
        pass

    @property
    @abstractmethod
    def decoder_heads(self) -> int:
        pass

    def _get_env_with_fallback(self, env_var: str, fallback):
        """Environment override when set and non-empty, else ``fallback``."""
        value = os.environ.get(env_var)
        return type(fallback)(value) if value else fallback

    def overrides(self) -> Dict[str, Any]:
        """Dotted-key settings of this regime, environment overrides applied."""
        prefix = "AQA_" + self.__class__.__name__.replace("Regime", "").upper()
        return {
            "train.learning_rate": self._get_env_with_fallback(f"{prefix}_LEARNING_RATE", self.learning_rate),
            "train.weight_decay": self._get_env_with_fallback(f"{prefix}_WEIGHT_DECAY", self.weight_decay),
            "train.batch_size": self._get_env_with_fallback(f"{prefix}_BATCH_SIZE", self.batch_size),
            "model.n_decoder_layers": self.decoder_layers,
            "model.n_decoder_heads": self.decoder_heads,
        }


class ConvRegime(ArchitectureRegime):
    """3D-conv backbone: batch 16, lr 5e-5, decay 1e-2; decoder of 2 layers x 4 heads."""

    learning_rate = 5e-5
    weight_decay = 1e-2
    batch_size = 16
    decoder_layers = 2
    decoder_heads = 4


class TransformerRegime(ArchitectureRegime):
    """Space-time transformer backbone: batch 4, lr 1e-5, decay 1e-5; 4 decoder layers."""

    learning_rate = 1e-5
    weight_decay = 1e-5
    batch_size = 4
    decoder_layers = 4
    decoder_heads = 4


REGIMES: Dict[Variant, ArchitectureRegime] = {
    Variant.CONV_MLP: ConvRegime(),
    Variant.CONV_DECODER: ConvRegime(),
    Variant.ENCODER_MLP: TransformerRegime(),
    Variant.ENCODER_DECODER: TransformerRegime(),
}


def resolve_axis(key: str) -> Tuple[str, ...]:
    """Map a dotted key such as ``loss.alpha`` to its ExperimentConfig attribute path."""
    section, _, rest = key.strip().partition(".")
    if section not in SECTIONS or not rest:
        raise ConfigError(f"Unknown config key: {key}. Sections: {list(SECTIONS)}")
    path = SECTIONS[section] + tuple(rest.split("."))
    node: Any = ExperimentConfig
    for part in path:
        fields = getattr(node, "model_fields", None)
        if fields is None or part not in fields:
            raise ConfigError(f"Unknown config key: {key}")
        node = fields[part].annotation
    return path


def _set_path(tree: Dict[str, Any], path: Tuple[str, ...], value: Any) -> None:
    for part in path[:-1]:
        tree = tree.setdefault(part, {})
    tree[path[-1]] = value


def _coerce(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in _NONE_VALUES:
        return None
    return value.strip() if isinstance(value, str) else value


def _sync_dependent(tree: Dict[str, Any]) -> None:
    """Fill settings that must agree with another one when only one side was given."""
    model = tree.setdefault("model", {})
    sampler = tree.setdefault("train", {}).setdefault("sampler", {})
    if "n_frames" in model and "n_frames" not in sampler:
        sampler["n_frames"] = model["n_frames"]
    elif "n_frames" in sampler and "n_frames" not in model:
        model["n_frames"] = sampler["n_frames"]
    if "image_size" in model:
        preprocess = tree.setdefault("preprocess", {})
        preprocess.setdefault("crop", model["image_size"])
        preprocess.setdefault("short_side", int(model["image_size"]) * 8 // 7)


def _regime_settings(settings: Dict[str, Any]) -> Dict[str, Any]:
    """Regime overrides for the variant named in ``settings`` (the default variant when absent)."""
    raw = next((v for k, v in settings.items() if k.strip() == "model.variant"), None)
    try:
        variant = Variant(_coerce(raw)) if raw is not None else ExperimentConfig().model.variant
    except ValueError:
        return {}
    return REGIMES[variant].overrides()


def build_experiment_config(
    settings: Dict[str, Any], base: Optional[ExperimentConfig] = None, regime: bool = True
) -> ExperimentConfig:
    """Apply dotted-key ``settings`` on top of ``base``.

    Without ``base`` the settings start from the defaults, with the variant's
    regime (optimizer and decoder defaults) applied first unless ``regime`` is
    false. Explicit settings always win.
    """
    if base is None:
        tree = ExperimentConfig().model_dump(mode="json")
        # decoder depth follows the variant
        del tree["model"]["n_decoder_layers"]
        if regime:
            settings = {**_regime_settings(settings), **settings}
    else:
        tree = base.model_dump(mode="json")
    given: Dict[str, Any] = {}
    for key, value in settings.items():
        path = resolve_axis(key)
        _set_path(given, path, _coerce(value))
    _sync_dependent(given)
    _merge(tree, given)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def _merge(tree: Dict[str, Any], updates: Dict[str, Any]) -> None:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(tree.get(key), dict):
            _merge(tree[key], value)
        else:
            tree[key] = value


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    settings = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        settings[key.strip()] = value
    return settings


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    regime: bool = True,
    base: Optional[ExperimentConfig] = None,
) -> ExperimentConfig:
    """Read a ``key=value`` experiment file, then apply ``--set`` style overrides.

    Settings land on ``base``, or on the defaults and the variant's regime
    when ``base`` is omitted (see :func:`build_experiment_config`).
    """
    settings: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        settings.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    settings.update(parse_overrides(overrides))
    return build_experiment_config(settings, base=base, regime=regime)


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the file format read by :func:`load_experiment_config`."""
    lines = []
    for section, path in SECTIONS.items():
        node: BaseModel = cfg
        for part in path:
            node = getattr(node, part)
        for name, value in node.model_dump(mode="json").items():
            if isinstance(value, dict):
                continue
            lines.append(f"{section}.{name}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def with_value(cfg: ExperimentConfig, key: str, value: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with one dotted key replaced (frame count and crop stay in sync)."""
    settings = {key: value}
    path = resolve_axis(key)
    if path[-1] == "n_frames":
        settings = {"model.n_frames": value, "sampler.n_frames": value}
    elif path == ("model", "image_size"):
        settings = {"model.image_size": value, "preprocess.crop": value,
                    "preprocess.short_side": int(value) * 8 // 7}
    return build_experiment_config(settings, base=cfg)


@dataclass(frozen=True)
class RuntimeConfig:
    """Process-level settings read from the environment."""

    log_level: str = "INFO"
    log_dir: Optional[str] = None
    workers: int = 0
    dtype: str = "float64"

    @classmethod
    def from_env(cls) -> "RuntimeConfig":
        try:
            workers = int(os.environ.get("AQA_WORKERS") or 0)
        except ValueError as e:
            raise ConfigError(f"AQA_WORKERS must be an integer: {e}") from e
        return cls(
            log_level=(os.environ.get("AQA_LOG_LEVEL") or "INFO").upper(),
            log_dir=os.environ.get("AQA_LOG_DIR") or None,
            workers=workers,
            dtype=os.environ.get("AQA_DTYPE") or "float64",
        )
