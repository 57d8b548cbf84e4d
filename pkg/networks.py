"""The four score-regression pipelines and the factory that builds them.

- conv_mlp: 3D-conv encoder -> MLP head
- conv_decoder: 3D-conv encoder -> transformer decoder -> MLP head
- encoder_mlp: divided space-time encoder -> MLP head
- encoder_decoder: divided space-time encoder -> transformer decoder -> linear head

Every model maps a clip batch [B, N, 3, H, W] to raw [B, 2] predictions of
(normalized score, difficulty).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Type, Union

import numpy as np

import diffcore as dc
from checkpoint import load_checkpoint, save_checkpoint
from diffcore import Tensor, no_grad
from layers import (
    Conv3d,
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    MLPHead,
    Module,
    MultiHeadAttention,
    broadcast_batch,
    get_activation,
    parameter,
)
from models import ModelConfig, Variant
from utils import atomic_write

logger = logging.getLogger(__name__)

# Full-scale reference widths: TimeSformer token width and the I3D clip embedding.
TIMESFORMER_EMBED_DIM = 768
I3D_EMBED_DIM = 1024
FULL_SCALE_MLP_TOPOLOGY = (512, 512, 2)

MODEL_FILE = "model.ckpt"
CONFIG_FILE = "model.json"


class ArchitectureError(ValueError):
    """Raised when inputs do not fit the configured architecture."""


@dataclass(frozen=True)
class PredictionPair:
    """Raw regression output for one clip."""

    normalized_score_hat: float
    difficulty_hat: float

    def final_score(self, clamp: bool = True) -> float:
        score = float(np.clip(self.normalized_score_hat, 0.0, 1.0)) if clamp else self.normalized_score_hat
        return score * self.difficulty_hat


def _check_clips(clips, cfg: ModelConfig) -> Tensor:
    clips = dc.as_tensor(clips)
    expected = (cfg.n_frames, 3, cfg.image_size, cfg.image_size)
    if clips.ndim != 5 or clips.shape[1:] != expected:
        raise ArchitectureError(f"expected clips [B, {', '.join(map(str, expected))}], got {clips.shape}")
    return clips


class PatchEmbedding(Module):
    """Linear patch projection, a prepended classification token and learned positions.

    Position 0 belongs to the classification token; position 1 + n * P + p to
    patch p of frame n.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.image_size % cfg.patch_size:
            raise ArchitectureError(
                f"patch_size ({cfg.patch_size}) must divide image_size ({cfg.image_size})"
            )
        self.cfg = cfg
        self.proj = Linear(3 * cfg.patch_size**2, cfg.embed_dim, rng)
        self.cls_token = parameter(rng.normal(scale=0.02, size=(1, 1, cfg.embed_dim)))
        self.positions = parameter(rng.normal(scale=0.02, size=(cfg.sequence_length, cfg.embed_dim)))

    def forward(self, clips) -> Tensor:
        clips = dc.as_tensor(clips)
        single = clips.ndim == 4
        if single:
            clips = dc.reshape(clips, (1, *clips.shape))
        b, n, c, h, w = clips.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ArchitectureError(f"frame {h}x{w} is not divisible by patch size {p}")
        if n != self.cfg.n_frames or c != 3 or h * w // p**2 != self.cfg.patches_per_frame:
            raise ArchitectureError(f"clip shape {clips.shape[1:]} does not match the model config")
        grid = dc.reshape(clips, (b, n, c, h // p, p, w // p, p))
        grid = dc.transpose(grid, (0, 1, 3, 5, 2, 4, 6))
        patches = dc.reshape(grid, (b, n * (h // p) * (w // p), c * p * p))
        tokens = dc.concat([broadcast_batch(self.cls_token, b), self.proj(patches)], axis=1)
        tokens = tokens + dc.embedding(self.positions, np.arange(self.cfg.sequence_length))
        return dc.reshape(tokens, tokens.shape[1:]) if single else tokens


class DividedSpaceTimeBlock(Module):
    """Temporal attention, then spatial attention, then feed-forward; pre-norm residuals.

    Tokens are [B, 1 + N*P, D]. In the temporal pass each grid token attends
    over its own spatial position's N copies plus the classification token;
    in the spatial pass over the P tokens of its frame plus the
    classification token, whose N per-frame outputs are averaged.
    """

    def __init__(
        self,
        dim: int,
        n_heads: int,
        n_frames: int,
        n_patches: int,
        rng: np.random.Generator,
        ffn_hidden: Optional[int] = None,
        activation: str = "gelu",
        eps: float = 1e-5,
    ):
        super().__init__()
        self.n_frames = n_frames
        self.n_patches = n_patches
        self.temporal_norm = LayerNorm(dim, eps)
        self.temporal_attn = MultiHeadAttention(dim, n_heads, rng)
        self.spatial_norm = LayerNorm(dim, eps)
        self.spatial_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ffn_norm = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn_hidden or 2 * dim, rng, activation)

    def _with_cls(self, cls: Tensor, grid: Tensor, groups: int) -> Tensor:
        b, _, d = cls.shape
        repeated = dc.reshape(cls, (b, 1, 1, d)) + np.zeros((b, groups, 1, d), dtype=cls.dtype)
        return dc.concat([dc.reshape(repeated, (b * groups, 1, d)), grid], axis=1)

    def forward(self, tokens: Tensor) -> Tensor:
        n, p = self.n_frames, self.n_patches
        if tokens.ndim != 3 or tokens.shape[1] != 1 + n * p:
            raise ArchitectureError(f"expected {1 + n * p} tokens (1 + {n}*{p}), got shape {tokens.shape}")
        b, _, d = tokens.shape

        x = self.temporal_norm(tokens)
        grid = dc.transpose(dc.reshape(x[:, 1:], (b, n, p, d)), (0, 2, 1, 3))
        seq = self._with_cls(x[:, :1], dc.reshape(grid, (b * p, n, d)), p)
        out = self.temporal_attn(seq)[:, 1:]
        out = dc.transpose(dc.reshape(out, (b, p, n, d)), (0, 2, 1, 3))
        tokens = dc.concat([tokens[:, :1], tokens[:, 1:] + dc.reshape(out, (b, n * p, d))], axis=1)

        x = self.spatial_norm(tokens)
        seq = self._with_cls(x[:, :1], dc.reshape(x[:, 1:], (b * n, p, d)), n)
        out = self.spatial_attn(seq)
        cls_out = dc.mean(dc.reshape(out[:, :1], (b, n, 1, d)), axis=1)
        grid_out = dc.reshape(out[:, 1:], (b, n * p, d))
        tokens = tokens + dc.concat([cls_out, grid_out], axis=1)

        return tokens + self.ffn(self.ffn_norm(tokens))


class SpaceTimeEncoder(Module):
    """Patch embedding followed by divided space-time blocks and a final norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbedding(cfg, rng)
        self.blocks = [
            DividedSpaceTimeBlock(
                cfg.embed_dim,
                cfg.n_heads,
                cfg.n_frames,
                cfg.patches_per_frame,
                rng,
                ffn_hidden=cfg.ffn_ratio * cfg.embed_dim,
                activation=cfg.activation,
                eps=cfg.layer_norm_eps,
            )
            for _ in range(cfg.n_encoder_layers)
        ]
        self.norm = LayerNorm(cfg.embed_dim, cfg.layer_norm_eps)

    def forward(self, clips) -> Tensor:
        """Token sequence [B, 1 + N*P, D]."""
        tokens = self.embed(clips)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def pool(self, tokens: Tensor) -> Tensor:
        if self.cfg.pooling == "mean":
            return dc.mean(tokens, axis=1)
        return dc.reshape(tokens[:, :1], (tokens.shape[0], tokens.shape[2]))


class ConvEncoder(Module):
    """Strided 3D convolutions, global average pooling and a linear projection to embed_dim."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        channels = [3, *cfg.conv_channels]
        self.convs = [
            Conv3d(c_in, c_out, (3, 3, 3), rng, stride=(1, 2, 2), padding=(1, 1, 1))
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ]
        self.activation = get_activation(cfg.activation)
        self.proj = Linear(channels[-1], cfg.embed_dim, rng)

    def forward(self, clips) -> Tensor:
        """Clip embeddings [B, D]; a single clip [N, 3, H, W] yields [D]."""
        clips = dc.as_tensor(clips)
        single = clips.ndim == 4
        if single:
            clips = dc.reshape(clips, (1, *clips.shape))
        if clips.ndim != 5 or clips.shape[2] != 3:
            raise ArchitectureError(f"expected clips [B, N, 3, H, W], got {clips.shape}")
        x = dc.transpose(clips, (0, 2, 1, 3, 4))
        for conv in self.convs:
            x = self.activation(conv(x))
        pooled = dc.mean(x, axis=(2, 3, 4))
        out = self.proj(pooled)
        return dc.reshape(out, (out.shape[1],)) if single else out


class DecoderLayer(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, ffn_hidden: int, activation: str, dropout: float, eps: float):
        super().__init__()
        self.self_norm = LayerNorm(dim, eps)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.cross_norm = LayerNorm(dim, eps)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ffn_norm = LayerNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn_hidden, rng, activation, dropout)
        self.dropout = Dropout(dropout)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        queries = queries + self.dropout(self.self_attn(self.self_norm(queries)))
        queries = queries + self.dropout(self.cross_attn(self.cross_norm(queries), memory))
        return queries + self.dropout(self.ffn(self.ffn_norm(queries)))


class TransformerDecoder(Module):
    """Learned query tokens cross-attending to an encoder memory."""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        n_layers: int,
        n_queries: int,
        rng: np.random.Generator,
        ffn_hidden: Optional[int] = None,
        activation: str = "gelu",
        dropout: float = 0.1,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.queries = parameter(rng.normal(scale=0.02, size=(1, n_queries, dim)))
        self.layers = [
            DecoderLayer(dim, n_heads, rng, ffn_hidden or 2 * dim, activation, dropout, eps)
            for _ in range(n_layers)
        ]
        self.norm = LayerNorm(dim, eps)

    def forward(self, memory: Tensor) -> Tensor:
        """memory [B, L, D] -> [B, n_queries, D]; an unbatched [L, D] memory gives [n_queries, D]."""
        memory = dc.as_tensor(memory)
        single = memory.ndim == 2
        if single:
            memory = dc.reshape(memory, (1, *memory.shape))
        if memory.ndim != 3 or memory.shape[1] == 0:
            raise ArchitectureError(f"decoder memory must be a non-empty [B, L, D] sequence, got {memory.shape}")
        queries = broadcast_batch(self.queries, memory.shape[0])
        for layer in self.layers:
            queries = layer(queries, memory)
        queries = self.norm(queries)
        return dc.reshape(queries, queries.shape[1:]) if single else queries


class AQAModel(Module):
    """Common surface of the four pipelines."""

    variant: Variant

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, clips) -> Tensor:
        return self.regress(_check_clips(clips, self.cfg))

    def regress(self, clips: Tensor) -> Tensor:
        raise NotImplementedError

    def predict(self, clips) -> np.ndarray:
        """Eval-mode [B, 2] predictions without recording a graph."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return np.array(self(clips).values, dtype=np.float64)
        finally:
            self.train(was_training)

    def predict_pairs(self, clips) -> List[PredictionPair]:
        return [PredictionPair(float(s), float(d)) for s, d in self.predict(clips)]

    def _decoder(self, rng: np.random.Generator) -> TransformerDecoder:
        cfg = self.cfg
        return TransformerDecoder(
            cfg.embed_dim,
            cfg.n_decoder_heads,
            cfg.n_decoder_layers,
            cfg.n_query_tokens,
            rng,
            ffn_hidden=cfg.ffn_ratio * cfg.embed_dim,
            activation=cfg.activation,
            dropout=cfg.dropout_decoder,
            eps=cfg.layer_norm_eps,
        )

    def _mlp_head(self, rng: np.random.Generator) -> MLPHead:
        cfg = self.cfg
        return MLPHead(cfg.embed_dim, cfg.mlp_topology, rng, cfg.activation, cfg.dropout_mlp)


def _pool_queries(queries: Tensor) -> Tensor:
    return dc.mean(queries, axis=1)


class ConvMLP(AQAModel):
    variant = Variant.CONV_MLP

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.encoder = ConvEncoder(cfg, rng)
        self.head = self._mlp_head(rng)

    def regress(self, clips):
        return self.head(self.encoder(clips))


class ConvDecoder(AQAModel):
    variant = Variant.CONV_DECODER

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.encoder = ConvEncoder(cfg, rng)
        self.decoder = self._decoder(rng)
        self.head = self._mlp_head(rng)

    def regress(self, clips):
        embedding = self.encoder(clips)
        memory = dc.reshape(embedding, (embedding.shape[0], 1, embedding.shape[1]))
        return self.head(_pool_queries(self.decoder(memory)))


class EncoderMLP(AQAModel):
    variant = Variant.ENCODER_MLP

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.encoder = SpaceTimeEncoder(cfg, rng)
        self.head = self._mlp_head(rng)

    def regress(self, clips):
        return self.head(self.encoder.pool(self.encoder(clips)))


class EncoderDecoder(AQAModel):
    variant = Variant.ENCODER_DECODER

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        self.encoder = SpaceTimeEncoder(cfg, rng)
        self.decoder = self._decoder(rng)
        self.head = Linear(cfg.embed_dim, 2, rng)

    def regress(self, clips):
        return self.head(_pool_queries(self.decoder(self.encoder(clips))))


class ArchitectureFactory:
    """Builds a model for a configured variant."""

    VARIANTS: Dict[Variant, Type[AQAModel]] = {
        Variant.CONV_MLP: ConvMLP,
        Variant.CONV_DECODER: ConvDecoder,
        Variant.ENCODER_MLP: EncoderMLP,
        Variant.ENCODER_DECODER: EncoderDecoder,
    }

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> AQAModel:
        try:
            model_cls = cls.VARIANTS[Variant(cfg.variant)]
        except (KeyError, ValueError) as e:
            raise ArchitectureError(
                f"Unknown variant: {cfg.variant}. Available: {[v.value for v in cls.VARIANTS]}"
            ) from e
        model = model_cls(cfg, np.random.default_rng(seed))
        model.seed_dropout(seed)
        logger.info(
            f"Built {model_cls.__name__} with {model.num_parameters()} parameters",
            extra={"variant": cfg.variant.value, "seed": seed},
        )
        return model


def minimal_config(variant: Union[Variant, str]) -> ModelConfig:
    """Smallest config exercising every component of ``variant``."""
    return ModelConfig(
        variant=Variant(variant),
        n_frames=2,
        image_size=8,
        patch_size=4,
        embed_dim=16,
        n_heads=2,
        n_encoder_layers=2,
        n_decoder_layers=2,
        n_decoder_heads=2,
        mlp_topology=(16, 2),
        n_query_tokens=2,
        ffn_ratio=2,
        conv_channels=(4,),
    )


def full_scale_config(variant: Union[Variant, str]) -> ModelConfig:
    """Shapes of the pretrained-backbone setups: 224px clips of 32 frames.

    Only for inspection and parameter counting; nothing at this scale trains
    on a CPU.
    """
    variant = Variant(variant)
    conv = variant in (Variant.CONV_MLP, Variant.CONV_DECODER)
    return ModelConfig(
        variant=variant,
        n_frames=32,
        image_size=224,
        patch_size=16,
        embed_dim=I3D_EMBED_DIM if conv else TIMESFORMER_EMBED_DIM,
        n_heads=16 if conv else 12,
        n_encoder_layers=12,
        n_decoder_layers=2 if conv else 4,
        n_decoder_heads=4,
        mlp_topology=FULL_SCALE_MLP_TOPOLOGY,
        ffn_ratio=4,
        conv_channels=(64, 192, 480, 832, I3D_EMBED_DIM),
    )


def save_model(model: AQAModel, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / MODEL_FILE, model.state_dict())
    with atomic_write(directory / CONFIG_FILE, encoding="utf-8") as handle:
        handle.write(model.cfg.model_dump_json(indent=2))
    return directory


def load_model(directory: Union[str, Path]) -> AQAModel:
    directory = Path(directory)
    cfg = ModelConfig.model_validate(json.loads((directory / CONFIG_FILE).read_text(encoding="utf-8")))
    model = ArchitectureFactory.create(cfg)
    model.load_state_dict(load_checkpoint(directory / MODEL_FILE))
    return model
