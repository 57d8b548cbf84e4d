"""Exact and differentiable ranking: Spearman correlation, soft ranks and the training loss."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

import diffcore as dc
from diffcore import Tensor
from models import LossConfig

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1


class RankingError(ValueError):
    """Raised for NaN input, a non-positive epsilon or a malformed batch."""


class UndefinedCorrelationError(ValueError):
    """Raised when one side of a correlation has zero (rank) variance."""


@dataclass(frozen=True)
class RankVector:
    """Ranks of n values, 1-based and ascending (largest value gets rank n)."""

    ranks: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ranks.shape[0])

    @property
    def mean(self) -> float:
        return float(self.ranks.mean())

    def centered(self) -> np.ndarray:
        return self.ranks - self.ranks.mean()


def _as_vector(x, name: str) -> np.ndarray:
    values = np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    if values.ndim != 1:
        raise RankingError(f"{name} must be 1-D, got shape {values.shape}")
    if values.size == 0:
        raise RankingError(f"{name} must not be empty")
    if np.isnan(values).any():
        raise RankingError(f"{name} contains NaN")
    return values


def hard_rank(x) -> RankVector:
    """Ascending ranks with average ranks for ties (not differentiable)."""
    return RankVector(rankdata(_as_vector(x, "x"), method="average").astype(np.float64))


def pearson(p, q) -> float:
    """Pearson correlation of two equal-length arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise RankingError(f"length mismatch: {p.shape} vs {q.shape}")
    pc, qc = p - p.mean(), q - q.mean()
    sp, sq = np.sqrt((pc**2).sum()), np.sqrt((qc**2).sum())
    if sp == 0.0 or sq == 0.0:
        raise UndefinedCorrelationError("correlation undefined: an input has zero variance")
    return float(np.clip((pc * qc).sum() / (sp * sq), -1.0, 1.0))


def _check_pair(y: np.ndarray, y_hat: np.ndarray) -> None:
    if y.shape != y_hat.shape:
        raise RankingError(f"length mismatch: y has {y.size}, y_hat has {y_hat.size}")
    if y.size < 2:
        raise RankingError("correlation needs at least 2 samples")


def spearman(y, y_hat) -> float:
    """Spearman's rho: Pearson correlation of the hard ranks of ``y`` and ``y_hat``."""
    y, y_hat = _as_vector(y, "y"), _as_vector(y_hat, "y_hat")
    _check_pair(y, y_hat)
    return pearson(hard_rank(y).ranks, hard_rank(y_hat).ranks)


def _pav_non_increasing(values: np.ndarray) -> tuple:
    """Isotonic (non-increasing) least-squares fit; returns the fit and block ids."""
    sums, counts = [], []
    for v in values:
        sums.append(float(v))
        counts.append(1)
        while len(sums) > 1 and sums[-2] / counts[-2] <= sums[-1] / counts[-1]:
            s, c = sums.pop(), counts.pop()
            sums[-1] += s
            counts[-1] += c
    fit = np.repeat([s / c for s, c in zip(sums, counts)], counts)
    blocks = np.repeat(np.arange(len(counts)), counts)
    return fit, blocks


def soft_rank(x, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Projection of ``x / epsilon`` onto the permutahedron of (1..n).

    The projection sorts z = x / epsilon in decreasing order, fits a
    non-increasing isotonic regression v to (z_sorted - (n, ..., 1)) with
    pool-adjacent-violators and returns z_sorted - v in the original order.
    The Jacobian subtracts the per-block mean of the incoming gradient.
    """
    if epsilon <= 0:
        raise RankingError(f"epsilon must be positive, got {epsilon}")
    x = dc.as_tensor(x)
    values = _as_vector(x, "x")
    if not np.all(np.isfinite(values)):
        raise RankingError("x must be finite")
    n = values.size
    z = values / epsilon
    order = np.argsort(-z, kind="stable")
    w = np.arange(n, 0, -1, dtype=np.float64)
    fit, blocks = _pav_non_increasing(z[order] - w)
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = z[order] - fit
    counts = np.bincount(blocks)

    def backward(g):
        g_sorted = g[order]
        block_means = np.bincount(blocks, weights=g_sorted) / counts
        grad = np.empty_like(g_sorted)
        grad[order] = (g_sorted - block_means[blocks]) / epsilon
        return (grad.astype(x.dtype),)

    return Tensor.from_op("soft_rank", ranks.astype(x.dtype), (x,), backward)


def soft_spearman(y, y_hat, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Correlation between hard ranks of ``y`` and soft ranks of ``y_hat``.

    Gradient flows to ``y_hat`` only.
    """
    y_values = _as_vector(y, "y")
    y_hat = dc.as_tensor(y_hat)
    _check_pair(y_values, _as_vector(y_hat, "y_hat"))
    p = hard_rank(y_values).centered()
    p_norm = np.sqrt((p**2).sum())
    if p_norm == 0.0:
        raise UndefinedCorrelationError("correlation undefined: targets are all tied")
    q = soft_rank(y_hat, epsilon)
    qc = q - q.mean()
    q_sq = (qc * qc).sum()
    if q_sq.item() <= 0.0:
        raise UndefinedCorrelationError("correlation undefined: soft ranks of predictions are constant")
    return (qc * (p / p_norm)).sum() * dc.power(q_sq, -0.5)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar training loss plus its two terms for logging."""

    total: Tensor
    mse: float
    spearman: Optional[float]


def _as_pairs(y, y_hat) -> tuple:
    targets = np.asarray(y.values if isinstance(y, Tensor) else y, dtype=np.float64)
    preds = dc.as_tensor(y_hat)
    if targets.ndim != 2 or targets.shape[1] != 2:
        raise RankingError(f"targets must be [B, 2], got shape {targets.shape}")
    if preds.shape != targets.shape:
        raise RankingError(f"batch mismatch: targets {targets.shape} vs predictions {preds.shape}")
    return targets, preds


def mse_spearman_terms(y, y_hat, cfg: LossConfig) -> LossBreakdown:
    """alpha * MSE(y, y_hat) - beta * soft Spearman over per-sample final scores.

    Both ``y`` and ``y_hat`` are [B, 2] batches of (normalized score,
    difficulty); the correlation term ranks their products. A batch whose
    targets are all tied or whose soft ranks are constant contributes no
    correlation term.
    """
    targets, preds = _as_pairs(y, y_hat)
    batch = targets.shape[0]
    if cfg.beta > 0 and batch < 2:
        raise RankingError(f"beta > 0 needs a batch of at least 2, got {batch}")

    mse = ((preds - targets) ** 2).mean()
    total = mse * cfg.alpha if cfg.alpha > 0 else None
    rho_value = None
    if cfg.beta > 0:
        final_hat = preds[:, 0] * preds[:, 1]
        final_y = targets[:, 0] * targets[:, 1]
        try:
            rho = soft_spearman(final_y, final_hat, cfg.epsilon)
        except UndefinedCorrelationError as e:
            logger.debug(f"Dropping correlation term for this batch: {e}")
        else:
            rho_value = rho.item()
            term = rho * (-cfg.beta)
            total = term if total is None else total + term
    if total is None:
        total = mse * 0.0
    return LossBreakdown(total=total, mse=mse.item(), spearman=rho_value)


def mse_spearman_loss(y, y_hat, cfg: LossConfig) -> Tensor:
    """Scalar form of :func:`mse_spearman_terms`."""
    return mse_spearman_terms(y, y_hat, cfg).total
