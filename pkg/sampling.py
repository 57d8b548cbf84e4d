"""Frame selection: random, fixed-offset and varied-offset sampling."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from models import SamplerConfig, SamplingStrategy

logger = logging.getLogger(__name__)


class SamplingError(ValueError):
    """Raised when a clip is too short or the sampler settings are invalid."""


@dataclass(frozen=True)
class FramePlan:
    """Sorted frame indices selected from a clip of ``clip_length`` frames."""

    indices: np.ndarray
    clip_length: int

    def __post_init__(self):
        indices = np.asarray(self.indices)
        if indices.ndim != 1:
            raise SamplingError(f"frame plan must be 1-D, got shape {indices.shape}")
        if indices.size and (indices.min() < 0 or indices.max() >= self.clip_length):
            raise SamplingError(f"frame indices must lie in [0, {self.clip_length}), got {indices.tolist()}")
        if np.any(np.diff(indices) < 0):
            raise SamplingError(f"frame indices must be sorted, got {indices.tolist()}")

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __str__(self) -> str:
        return " ".join(str(int(i)) for i in self.indices)


def subclip_bounds(t: int, n: int) -> np.ndarray:
    """Boundaries b with subclip i = [b[i], b[i+1]); b[i] = floor(i*T/N)."""
    return (np.arange(n + 1, dtype=np.int64) * t) // n


class FrameSampler(ABC):
    """Strategy for picking N frame indices out of T."""

    @abstractmethod
    def select(self, t: int, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
        pass


class RandomSampler(FrameSampler):
    """N distinct indices uniformly without replacement, sorted by time."""

    def select(self, t, cfg, rng):
        return np.sort(rng.choice(t, size=cfg.n_frames, replace=False))


class FixedOffsetSampler(FrameSampler):
    """Index k inside every subclip, clamped to the subclip's last frame."""

    def select(self, t, cfg, rng):
        bounds = subclip_bounds(t, cfg.n_frames)
        lengths = bounds[1:] - bounds[:-1]
        return bounds[:-1] + np.minimum(cfg.fixed_offset_k, lengths - 1)


class VariedOffsetSampler(FrameSampler):
    """One uniformly random index inside every subclip."""

    def select(self, t, cfg, rng):
        bounds = subclip_bounds(t, cfg.n_frames)
        return rng.integers(bounds[:-1], bounds[1:])


SAMPLERS: Dict[SamplingStrategy, FrameSampler] = {
    SamplingStrategy.RANDOM: RandomSampler(),
    SamplingStrategy.FIXED_OFFSET: FixedOffsetSampler(),
    SamplingStrategy.VARIED_OFFSET: VariedOffsetSampler(),
}


def plan_frames(
    t: int, cfg: SamplerConfig, rng: Optional[np.random.Generator] = None
) -> FramePlan:
    """Pick ``cfg.n_frames`` indices from a clip of ``t`` frames.

    Without an explicit ``rng`` the plan is drawn from ``cfg.rng_seed``, so
    the same config always yields the same plan.
    """
    if t < cfg.n_frames:
        raise SamplingError(f"clip has {t} frames, fewer than the {cfg.n_frames} requested")
    if cfg.fixed_offset_k < 0:
        raise SamplingError(f"fixed_offset_k must be >= 0, got {cfg.fixed_offset_k}")
    try:
        sampler = SAMPLERS[SamplingStrategy(cfg.strategy)]
    except (KeyError, ValueError) as e:
        raise SamplingError(
            f"Unknown sampling strategy: {cfg.strategy}. Available: {[s.value for s in SAMPLERS]}"
        ) from e
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    indices = np.asarray(sampler.select(t, cfg, rng), dtype=np.int64)
    return FramePlan(indices=indices, clip_length=t)
