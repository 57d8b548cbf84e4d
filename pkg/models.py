"""Validated configuration models for sampling, preprocessing, loss, model and training."""

from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

# Per-channel RGB statistics of the MTL-AQA training frames.
DEFAULT_MEAN_RGB = (0.2719, 0.4617, 0.5961)
DEFAULT_STD_RGB = (0.1870, 0.1881, 0.2604)


class SamplingStrategy(str, Enum):
    """Frame selection methods."""

    RANDOM = "random"
    FIXED_OFFSET = "fixed_offset"
    VARIED_OFFSET = "varied_offset"

    @classmethod
    def _missing_(cls, value):
        aliases = {"fixed": cls.FIXED_OFFSET, "varied": cls.VARIED_OFFSET}
        if isinstance(value, str):
            key = value.strip().lower().replace("-", "_")
            return aliases.get(key) or cls._value2member_map_.get(key)
        return None


class Variant(str, Enum):
    """The four architecture pipelines."""

    CONV_MLP = "conv_mlp"
    CONV_DECODER = "conv_decoder"
    ENCODER_MLP = "encoder_mlp"
    ENCODER_DECODER = "encoder_decoder"

    @property
    def is_conv(self) -> bool:
        return self in (Variant.CONV_MLP, Variant.CONV_DECODER)


def default_decoder_layers(variant: Variant) -> int:
    """Two decoder layers behind the conv backbone, four behind the space-time encoder."""
    return 2 if variant.is_conv else 4


def _split_ints(value):
    if isinstance(value, str):
        return tuple(int(part) for part in value.replace(" ", ",").split(",") if part)
    return value


def _split_floats(value):
    if isinstance(value, str):
        return tuple(float(part) for part in value.split(",") if part.strip())
    return value


class ValidationRule:
    """Cross-field checks that pydantic field constraints cannot express."""

    @staticmethod
    def validate_loss(cfg: "LossConfig") -> List[str]:
        errors = []
        if cfg.alpha + cfg.beta <= 0:
            errors.append("alpha + beta must be positive")
        return errors

    @staticmethod
    def validate_preprocess(cfg: "PreprocessConfig") -> List[str]:
        errors = []
        if any(s <= 0 for s in cfg.std_rgb):
            errors.append("std_rgb components must be positive")
        if cfg.crop > cfg.short_side:
            errors.append(f"crop ({cfg.crop}) must not exceed short_side ({cfg.short_side})")
        return errors

    @staticmethod
    def validate_model(cfg: "ModelConfig") -> List[str]:
        errors = []
        if cfg.embed_dim % cfg.n_heads:
            errors.append(f"embed_dim ({cfg.embed_dim}) must be divisible by n_heads ({cfg.n_heads})")
        if cfg.embed_dim % cfg.n_decoder_heads:
            errors.append(
                f"embed_dim ({cfg.embed_dim}) must be divisible by n_decoder_heads ({cfg.n_decoder_heads})"
            )
        if cfg.image_size % cfg.patch_size:
            errors.append(
                f"patch_size ({cfg.patch_size}) must divide image_size ({cfg.image_size})"
            )
        if not cfg.mlp_topology or cfg.mlp_topology[-1] != 2:
            errors.append("mlp_topology must end with width 2 (normalized score, difficulty)")
        return errors

    @staticmethod
    def validate_train(cfg: "TrainConfig") -> List[str]:
        errors = []
        if cfg.loss.beta > 0 and cfg.batch_size < 2:
            errors.append("batch_size must be >= 2 when loss.beta > 0 (Spearman needs two samples)")
        return errors

    @staticmethod
    def validate_experiment(cfg: "ExperimentConfig") -> List[str]:
        errors = []
        if cfg.model.n_frames != cfg.train.sampler.n_frames:
            errors.append(
                f"model.n_frames ({cfg.model.n_frames}) must equal sampler.n_frames "
                f"({cfg.train.sampler.n_frames})"
            )
        if cfg.preprocess.crop != cfg.model.image_size:
            errors.append(
                f"preprocess.crop ({cfg.preprocess.crop}) must equal model.image_size "
                f"({cfg.model.image_size})"
            )
        if cfg.data.source == "synthetic" and cfg.data.frame_count < cfg.train.sampler.n_frames:
            errors.append("data.frame_count must be >= sampler.n_frames")
        return errors

    @staticmethod
    def raise_if(errors: List[str]) -> None:
        if errors:
            raise ValueError("; ".join(errors))


class LossConfig(BaseModel):
    """Weights of the MSE and Spearman terms plus the soft-rank strength."""

    alpha: float = Field(1.0, ge=0, description="MSE weight")
    beta: float = Field(1.0, ge=0, description="Spearman weight")
    epsilon: float = Field(0.1, gt=0, description="Soft-rank regularization strength")

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def check_weights(self):
        ValidationRule.raise_if(ValidationRule.validate_loss(self))
        return self


class SamplerConfig(BaseModel):
    """Which frames to pick from a clip."""

    strategy: SamplingStrategy = SamplingStrategy.VARIED_OFFSET
    n_frames: int = Field(8, ge=1, description="Requested frame count N")
    fixed_offset_k: int = Field(0, ge=0, description="Intra-subclip index for fixed_offset")
    rng_seed: int = 0

    model_config = {"frozen": True}


class PreprocessConfig(BaseModel):
    """Resize, crop, flip and per-channel standardization settings."""

    mean_rgb: Tuple[float, float, float] = DEFAULT_MEAN_RGB
    std_rgb: Tuple[float, float, float] = DEFAULT_STD_RGB
    short_side: int = Field(256, ge=1)
    crop: int = Field(224, ge=1)
    hflip_prob: float = Field(0.5, ge=0, le=1)
    augment: bool = True
    normalize: bool = True

    model_config = {"frozen": True}

    _split_mean = field_validator("mean_rgb", "std_rgb", mode="before")(_split_floats)

    @model_validator(mode="after")
    def check_geometry(self):
        ValidationRule.raise_if(ValidationRule.validate_preprocess(self))
        return self


class ModelConfig(BaseModel):
    """Architecture variant plus every shape hyperparameter."""

    variant: Variant = Variant.ENCODER_MLP
    n_frames: int = Field(8, ge=1)
    image_size: int = Field(32, ge=1)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(16, ge=1)
    n_heads: int = Field(2, ge=1)
    n_encoder_layers: int = Field(2, ge=1)
    n_decoder_layers: int = Field(4, ge=1, description="Unset: 2 for conv variants, 4 otherwise")
    n_decoder_heads: int = Field(4, ge=1)
    mlp_topology: Tuple[int, ...] = (32, 32, 2)
    dropout_mlp: float = Field(0.2, ge=0, lt=1)
    dropout_decoder: float = Field(0.1, ge=0, lt=1)
    n_query_tokens: int = Field(1, ge=1)
    ffn_ratio: int = Field(2, ge=1, description="Feed-forward hidden width / embed_dim")
    conv_channels: Tuple[int, ...] = (8, 16)
    activation: Literal["gelu", "relu"] = "gelu"
    pooling: Literal["cls", "mean"] = "cls"
    layer_norm_eps: float = Field(1e-5, gt=0)

    model_config = {"frozen": True}

    _split_topology = field_validator("mlp_topology", "conv_channels", mode="before")(_split_ints)

    @model_validator(mode="before")
    @classmethod
    def default_decoder_depth(cls, data):
        if isinstance(data, dict) and data.get("n_decoder_layers") is None:
            try:
                variant = Variant(data.get("variant", cls.model_fields["variant"].default))
            except ValueError:
                return data  # the field validator reports the bad variant
            data = {**data, "n_decoder_layers": default_decoder_layers(variant)}
        return data

    @model_validator(mode="after")
    def check_shapes(self):
        ValidationRule.raise_if(ValidationRule.validate_model(self))
        return self

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def sequence_length(self) -> int:
        """Classification token plus one token per (frame, patch) slot."""
        return 1 + self.n_frames * self.patches_per_frame


class TrainConfig(BaseModel):
    """Optimizer, schedule and loop settings."""

    epochs: int = Field(200, ge=0)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(1e-5, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    loss: LossConfig = LossConfig()
    sampler: SamplerConfig = SamplerConfig()
    seed: int = 0
    checkpoint_every: int = Field(50, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0)
    warmup_epochs: int = Field(0, ge=0)
    freeze_frame_plans: bool = False
    workers: int = Field(0, ge=0)
    eval_batch_size: int = Field(16, ge=1)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def check_batch(self):
        ValidationRule.raise_if(ValidationRule.validate_train(self))
        return self


class DataConfig(BaseModel):
    """Where clips come from: a manifest file or the synthetic generator."""

    source: Literal["synthetic", "manifest"] = "synthetic"
    manifest: Optional[str] = None
    n_clips: int = Field(640, ge=0)
    frame_count: int = Field(64, ge=1)
    height: int = Field(32, ge=1)
    width: int = Field(32, ge=1)
    seed: int = 0
    test_fraction: float = Field(0.2, ge=0, lt=1)

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def check_manifest(self):
        if self.source == "manifest" and not self.manifest:
            raise ValueError("data.manifest is required when data.source=manifest")
        return self


class ExperimentConfig(BaseModel):
    """Everything one training + evaluation run needs."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    preprocess: PreprocessConfig = PreprocessConfig(short_side=36, crop=32)

    model_config = {"frozen": True, "protected_namespaces": ()}

    @model_validator(mode="after")
    def check_consistency(self):
        ValidationRule.raise_if(ValidationRule.validate_experiment(self))
        return self
