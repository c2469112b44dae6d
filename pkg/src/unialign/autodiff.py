"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine covers a fixed set of kernels: elementwise arithmetic, matmul
(with leading batch dimensions), softmax / log-softmax over the last axis,
layer norm, scaled dot-product attention, L2 row normalization, GELU,
sum/mean reductions, concatenation, reshaping, and row gathering. Nothing
else is needed by the models in this package, and nothing else is provided.

Kernels are pure: the graph hangs off each output tensor and there is no
global tape, so concurrent forward evaluation is safe. Training mutates
parameters through the optimizer only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateEmbeddingError,
    EvaluationError,
    SequenceError,
    ShapeError,
)

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "gelu",
    "clip",
    "matmul",
    "swapaxes",
    "reshape",
    "broadcast_to",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "l2_normalize",
    "scaled_dot_attention",
    "gather_rows",
    "grad_check",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

NORM_FLOOR = 1e-12


class Tensor:
    """A float64 array plus an optional backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)  # keeps 0-d shapes intact
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """A graph-free tensor sharing this tensor's array."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar output, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in _toposort(self):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; every overload routes through a module-level kernel.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable tensor with a persistent gradient slot and a freeze flag.

    A frozen parameter takes part in forward computation as a constant: no
    gradient ever accumulates into it and the optimizer must leave its value
    bit-identical. ``decay`` marks whether weight decay applies (off for
    biases, norm gains, and the temperature).
    """

    __slots__ = ("frozen", "decay")

    def __init__(self, data, frozen: bool = False, decay: bool = True):
        super().__init__(data, requires_grad=not frozen)
        self.frozen = frozen
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> Iterable[Tensor]:
    """Nodes reachable from root, children before parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return reversed(order)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


def gelu(a) -> Tensor:
    """GELU, tanh approximation; fixed across the codebase for determinism."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _node(data, (a,), backward)


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values to [low, high]; gradient passes only inside the range."""
    a = as_tensor(a)
    data = np.clip(a.data, low, high)
    inside = (a.data >= low) & (a.data <= high)

    def backward(g):
        _accumulate(a, g * inside)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape kernels


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs matrices, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, axis1, axis2)

    def backward(g):
        _accumulate(a, np.swapaxes(g, axis1, axis2))

    return _node(np.ascontiguousarray(data), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _node(np.ascontiguousarray(data), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise SequenceError("concat of an empty tensor list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(part, piece)

    return _node(data, tuple(parts), backward)


def gather_rows(a, indices) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, indices[i]]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accumulate(a, full)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(data, (a,), backward)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape) / count)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# fused neural-network kernels


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * data)

    return _node(data, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    """Log-softmax over the last axis (stable logsumexp form)."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _node(data, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    dim = a.data.shape[-1]
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({dim},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = normed * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * normed).reshape(-1, dim).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, dim).sum(axis=0))
        gy = g * gain.data
        term = gy - gy.mean(axis=-1, keepdims=True)
        term -= normed * (gy * normed).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv)

    return _node(data, (a, gain, bias), backward)


def l2_normalize(a) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= NORM_FLOOR):
        raise DegenerateEmbeddingError(
            f"cannot normalize rows with norm <= {NORM_FLOOR}"
        )
    data = a.data / norms

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - data * dot) / norms)

    return _node(data, (a,), backward)


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with softmax over the key axis.

    Leading batch dimensions broadcast; the key and value sequences must be
    nonempty and share their length.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dim = q.data.shape[-1]
    if k.data.shape[-1] != dim or v.data.shape[-1] != dim:
        raise ShapeError(
            f"attention dimensions disagree: q {q.data.shape}, "
            f"k {k.data.shape}, v {v.data.shape}"
        )
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(
            f"attention key/value lengths disagree: {k.data.shape} vs {v.data.shape}"
        )
    if k.data.shape[-2] == 0:
        raise SequenceError("attention over an empty key sequence")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dim))
    return matmul(softmax_rows(scores), v)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of the scalar f() against central differences.

    Returns the maximum over checked entries of
    ``|analytic - central| / max(1, |central|)``. Frozen parameters are
    skipped (their gradient slots stay zero). When ``max_entries_per_param``
    is set, a seeded subsample of entries is checked per parameter; entries
    are perturbed in place and restored exactly.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar objective, got {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("objective is non-finite at the given parameters")
    out.backward()
    analytic = [p.grad.copy() for p in live]

    picker = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for p, ga in zip(live, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = np.sort(
                picker.choice(n, size=max_entries_per_param, replace=False)
            )
        else:
            entries = range(n)
        for i in entries:
            original = flat[i]
            flat[i] = original + step
            f_plus = f().item()
            flat[i] = original - step
            f_minus = f().item()
            flat[i] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise EvaluationError("objective is non-finite during perturbation")
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(ga.reshape(-1)[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
