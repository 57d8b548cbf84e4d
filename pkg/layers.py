"""Neural network building blocks on top of the diffcore engine."""

import logging
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

import diffcore as dc
from diffcore import ShapeError, Tensor

logger = logging.getLogger(__name__)

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "gelu": dc.gelu,
    "relu": dc.relu,
}


def get_activation(name: str) -> Callable[[Tensor], Tensor]:
    if name not in ACTIVATIONS:
        raise ValueError(f"Unknown activation: {name}. Available: {list(ACTIVATIONS)}")
    return ACTIVATIONS[name]


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a [1, ...] tensor ``batch`` times along axis 0 (gradients sum back)."""
    return x + np.zeros((batch,) + x.shape[1:], dtype=x.dtype)


class Module:
    """Base class: recursive parameter discovery, train/eval mode, dropout seeding."""

    def __init__(self) -> None:
        self.training = True
        self.dropout_rng = np.random.default_rng(0)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """Trainable tensors keyed by dotted path, in construction order."""
        params: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + name] = value
        for name, child in self.children():
            params.update(child.parameters(prefix=f"{prefix}{name}."))
        return params

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def seed_dropout(self, seed) -> None:
        """Share one freshly seeded generator across every dropout in the tree."""
        rng = np.random.default_rng(seed)
        for module in self.modules():
            module.dropout_rng = rng

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {path: tensor.values.copy() for path, tensor in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for path, tensor in params.items():
            tensor.assign(state[path])

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


class Linear(Module):
    """y = x @ W + b with W stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError("linear", x.shape, self.weight.shape)
        if x.ndim == 1:
            out = dc.reshape(x, (1, -1)) @ self.weight
            out = dc.reshape(out, (self.weight.shape[1],))
        else:
            out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.eps) * self.gamma + self.beta


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return dc.dropout(x, self.p, rng=self.dropout_rng, training=self.training)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value inputs.

    The softmax weights of the last call are kept in ``last_attention`` as a
    [B, heads, Lq, Lk] array.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim ({dim}) must be divisible by n_heads ({n_heads})")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return dc.transpose(dc.reshape(x, (b, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, query: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = query if context is None else context
        if query.ndim != 3 or context.ndim != 3 or query.shape[0] != context.shape[0]:
            raise ShapeError("attention", query.shape, context.shape)
        b, lq, dim = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        scores = (q @ dc.transpose(k)) * (1.0 / np.sqrt(self.head_dim))
        weights = dc.softmax(scores)
        self.last_attention = weights.values
        mixed = dc.transpose(weights @ v, (0, 2, 1, 3))
        return self.out_proj(dc.reshape(mixed, (b, lq, dim)))


class FeedForward(Module):
    def __init__(
        self, dim: int, hidden: int, rng: np.random.Generator, activation: str = "gelu", dropout: float = 0.0
    ):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.activation = get_activation(activation)
        self.dropout = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(self.activation(self.fc1(x))))


class MLPHead(Module):
    """Stack of Linear layers; every layer but the last is followed by activation + dropout."""

    def __init__(
        self,
        in_features: int,
        topology: Sequence[int],
        rng: np.random.Generator,
        activation: str = "gelu",
        dropout: float = 0.0,
    ):
        super().__init__()
        widths = [in_features, *topology]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.activation = get_activation(activation)
        self.dropout = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.dropout(self.activation(layer(x)))
        return self.layers[-1](x)


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: Tuple[int, int, int],
        rng: np.random.Generator,
        stride: Tuple[int, int, int] = (1, 1, 1),
        padding: Tuple[int, int, int] = (0, 0, 0),
        bias: bool = True,
    ):
        super().__init__()
        fan_in = in_channels * int(np.prod(kernel))
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(out_channels, in_channels, *kernel)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(out_channels,))) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
