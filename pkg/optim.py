"""AdamW: Adam moments with decoupled weight decay."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from diffcore import Tensor

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient holds NaN or infinity."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"non-finite gradient for parameter {path}")


@dataclass
class MomentState:
    """Per-parameter first/second moments and the shared step count."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat mapping for checkpointing (``m/<path>``, ``v/<path>``, ``step``)."""
        out = {"step": np.array(float(self.step))}
        out.update({f"m/{path}": value for path, value in self.m.items()})
        out.update({f"v/{path}": value for path, value in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "MomentState":
        state = cls(step=int(arrays["step"]))
        for key, value in arrays.items():
            kind, _, path = key.partition("/")
            if kind == "m":
                state.m[path] = np.array(value)
            elif kind == "v":
                state.v[path] = np.array(value)
        return state


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    lr: float,
    weight_decay: float,
    state: MomentState,
    betas=(BETA1, BETA2),
    eps: float = EPS,
) -> None:
    """One in-place AdamW update.

    Every parameter is first shrunk by (1 - lr * weight_decay), independent of
    its gradient; the bias-corrected Adam step then uses the gradient alone.
    A missing gradient counts as zero.
    """
    for path, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(path)
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for path, tensor in params.items():
        grad = grads.get(path)
        if grad is None:
            grad = np.zeros_like(tensor.values)
        m = state.m.get(path)
        v = state.v.get(path)
        if m is None:
            m = np.zeros_like(tensor.values, dtype=np.float64)
            v = np.zeros_like(tensor.values, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[path], state.v[path] = m, v
        decayed = tensor.values * (1.0 - lr * weight_decay)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        tensor.assign(decayed - update)


def clip_grad_norm(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for path, g in grads.items():
            if g is not None:
                grads[path] = g * scale
    return total


class AdamW:
    """Stateful wrapper binding :func:`optimizer_step` to a parameter set."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = MomentState()

    def step(self, lr: Optional[float] = None, max_grad_norm: Optional[float] = None) -> float:
        """Apply one update from the parameters' ``.grad``; returns the pre-clip gradient norm."""
        grads = {path: t.grad for path, t in self.params.items()}
        for path, grad in grads.items():
            if grad is not None and not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(path)
        norm = clip_grad_norm(grads, max_grad_norm) if max_grad_norm else float(
            np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
        )
        optimizer_step(self.params, grads, self.lr if lr is None else lr, self.weight_decay, self.state)
        return norm

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return self.state.arrays()

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.state = MomentState.from_arrays(arrays)
