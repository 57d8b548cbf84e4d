"""Minimal reverse-mode autodiff engine on top of numpy.

Every op returns a new Tensor. When any input requires a gradient the op also
records a Node holding its parents and a backward rule that maps the output
gradient to one gradient per parent; ``Tensor.backward`` walks that DAG in
reverse topological order.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_grad_mode = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes do not conform."""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        message = f"{op}: incompatible shapes " + " and ".join(
            str(tuple(s)) for s in shapes
        )
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GraphError(RuntimeError):
    """Raised for invalid use of the backward graph."""


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class Node:
    """Backward-graph record of the op that produced a tensor."""

    op: str
    parents: Tuple["Tensor", ...]
    backward: BackwardFn


def set_default_dtype(name: str) -> None:
    """Switch the dtype used for new tensors ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"Unsupported dtype: {name}. Available: {list(_DTYPES)}")
    _default_dtype = _DTYPES[name]
    logger.debug(f"Default tensor dtype set to {name}")


def get_default_dtype() -> type:
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """n-dimensional value with an optional gradient accumulator."""

    __slots__ = ("values", "grad", "node", "requires_grad", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ) -> None:
        self.values = np.array(values, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def from_op(
        cls,
        op: str,
        values: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
    ) -> "Tensor":
        """Wrap an op result, recording the backward rule when needed."""
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.node = None
        out.name = None
        out.requires_grad = is_grad_enabled() and any(
            p.requires_grad for p in parents
        )
        if out.requires_grad:
            out.node = Node(op=op, parents=tuple(parents), backward=backward)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, values: np.ndarray) -> None:
        """Replace the stored values (optimizer updates, checkpoint loads)."""
        values = np.asarray(values, dtype=self.values.dtype)
        if values.shape != self.values.shape:
            raise ShapeError("assign", self.values.shape, values.shape)
        self.values = values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{label}{op})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's grad."""
        if self.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.values)}
        for tensor in reversed(order):
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            if tensor.node is None or tensor is self:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            if tensor.node is None:
                continue
            parent_grads = tensor.node.backward(grad)
            for parent, parent_grad in zip(tensor.node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(op, a.shape, b.shape) from e


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return Tensor.from_op(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return Tensor.from_op(
        "sub",
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return Tensor.from_op(
        "mul",
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes") from e

    def backward(g):
        grad_a = g @ np.swapaxes(b.values, -1, -2)
        grad_b = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor.from_op("matmul", a.values @ b.values, (a, b), backward)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose", x.shape, detail="needs rank >= 2")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {axes}")
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        "transpose",
        np.transpose(x.values, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        values = x.values.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", x.shape, tuple(shape)) from e
    return Tensor.from_op("reshape", values, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no operands")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ShapeError("concat", first.shape, t.shape, detail=f"axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(
        "concat",
        np.concatenate([t.values for t in tensors], axis=axis),
        tensors,
        backward,
    )


def slice_(x: TensorLike, key) -> Tensor:
    x = as_tensor(x)
    try:
        values = x.values[key]
    except IndexError as e:
        raise ShapeError("slice", x.shape, detail=str(e)) from e

    def backward(g):
        grad = np.zeros_like(x.values)
        np.add.at(grad, key, g)
        return (grad,)

    return Tensor.from_op("slice", np.array(values), (x,), backward)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(
        "sum", np.sum(x.values, axis=axes, keepdims=keepdims), (x,), backward
    )


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(x: TensorLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op("softmax", y, (x,), backward)


def layer_norm(x: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * normed).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - normed * gx_mean),)

    return Tensor.from_op("layer_norm", normed, (x,), backward)


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: TensorLike) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.values * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.values**2)
    return Tensor.from_op(
        "gelu", x.values * cdf, (x,), lambda g: (g * (cdf + x.values * pdf),)
    )


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return Tensor.from_op(
        "relu", np.where(mask, x.values, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,)
    )


def dropout(
    x: TensorLike,
    p: float,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
    training: bool = True,
) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0.

    The keep-mask is either given explicitly or drawn from ``rng`` so a fixed
    seed reproduces it exactly.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= p
    elif mask.shape != x.shape:
        raise ShapeError("dropout", x.shape, mask.shape)
    scale = mask.astype(x.dtype) / (1.0 - p)
    return Tensor.from_op("dropout", x.values * scale, (x,), lambda g: (g * scale,))


def embedding(table: TensorLike, indices) -> Tensor:
    """Row lookup ``table[indices]``."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, detail="table must be 2-D")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, indices.shape, detail="index out of range")

    def backward(g):
        grad = np.zeros_like(table.values)
        np.add.at(grad, indices, g)
        return (grad,)

    return Tensor.from_op("embedding", table.values[indices], (table,), backward)


def power(x: TensorLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)
    return Tensor.from_op(
        "power",
        x.values**exponent,
        (x,),
        lambda g: (g * exponent * x.values ** (exponent - 1.0),),
    )


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    root = np.sqrt(x.values)
    return Tensor.from_op("sqrt", root, (x,), lambda g: (g * 0.5 / root,))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return Tensor.from_op("exp", y, (x,), lambda g: (g * y,))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return Tensor.from_op("log", np.log(x.values), (x,), lambda g: (g / x.values,))


def conv3d(
    x: TensorLike,
    weight: TensorLike,
    bias: Optional[TensorLike] = None,
    stride: Tuple[int, int, int] = (1, 1, 1),
    padding: Tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """3D convolution of ``x`` [B, C, T, H, W] with ``weight`` [O, C, kt, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv3d", x.shape, weight.shape)
    kernel = weight.shape[2:]
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    padded = np.pad(x.values, pads) if any(padding) else x.values
    if any(padded.shape[2 + i] < kernel[i] for i in range(3)):
        raise ShapeError("conv3d", x.shape, weight.shape, detail="kernel larger than input")
    st, sh, sw = stride
    windows = sliding_window_view(padded, kernel, axis=(2, 3, 4))[
        :, :, ::st, ::sh, ::sw
    ]
    out_t, out_h, out_w = windows.shape[2:5]
    values = np.einsum("bcthwijk,ocijk->bothw", windows, weight.values, optimize=True)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv3d", weight.shape, bias.shape, detail="bias")
        values = values + bias.values[None, :, None, None, None]
        parents.append(bias)

    def backward(g):
        grad_w = np.einsum("bothw,bcthwijk->ocijk", g, windows, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kernel[0]):
            for j in range(kernel[1]):
                for k in range(kernel[2]):
                    contribution = np.einsum(
                        "bothw,oc->bcthw", g, weight.values[:, :, i, j, k]
                    )
                    grad_padded[
                        :,
                        :,
                        i : i + st * (out_t - 1) + 1 : st,
                        j : j + sh * (out_h - 1) + 1 : sh,
                        k : k + sw * (out_w - 1) + 1 : sw,
                    ] += contribution
        pt, ph, pw = padding
        grad_x = grad_padded[
            :,
            :,
            pt : grad_padded.shape[2] - pt,
            ph : grad_padded.shape[3] - ph,
            pw : grad_padded.shape[4] - pw,
        ]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return Tensor.from_op("conv3d", values, parents, backward)
