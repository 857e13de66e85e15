"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and, when gradients are enabled, remembers how
it was produced as a list of (parent, vector-Jacobian-product) pairs.
``Tensor.backward()`` walks that tape once in reverse topological order and
accumulates gradients into the leaves' ``.grad`` fields.  Inference code runs
inside ``no_grad()`` which skips tape construction entirely.

Only the operations the retrieval models need are implemented.  All of them
support arbitrary leading batch dimensions and numpy-style broadcasting;
gradients of broadcast operands are summed back to the operand's shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # list of (parent, fn) pairs; fn maps the output gradient to the
        # parent's gradient contribution.  None marks a leaf.
        self._vjps: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Gradients add onto whatever is already stored, so callers must clear
        leaf gradients between independent backward passes.
        """
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no tracked inputs")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._vjps:
                for parent, _ in node._vjps:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjps is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node._vjps:
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                held = grads.get(id(parent))
                grads[id(parent)] = contrib if held is None else held + contrib

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, vjps: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Wrap an op result, keeping only tape edges that lead to tracked inputs."""
    out = Tensor(data)
    if _GRAD_ENABLED:
        live = [(p, fn) for p, fn in vjps if p.requires_grad]
        if live:
            out._vjps = live
            out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

# Plain python numbers stay raw scalars instead of being wrapped into
# float64 tensors: numpy treats them as weak-typed, so float32 activations
# keep their dtype through expressions like `x * 0.5`.


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _is_number(b):
        a = astensor(a)
        return _node(a.data + b, [(a, lambda g: g)])
    if _is_number(a):
        b = astensor(b)
        return _node(a + b.data, [(b, lambda g: g)])
    a, b = astensor(a), astensor(b)
    return _node(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    if _is_number(b):
        a = astensor(a)
        return _node(a.data - b, [(a, lambda g: g)])
    if _is_number(a):
        b = astensor(b)
        return _node(a - b.data, [(b, lambda g: -g)])
    a, b = astensor(a), astensor(b)
    return _node(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def neg(a) -> Tensor:
    a = astensor(a)
    return _node(-a.data, [(a, lambda g: -g)])


def mul(a, b) -> Tensor:
    if _is_number(b):
        a = astensor(a)
        return _node(a.data * b, [(a, lambda g: g * b)])
    if _is_number(a):
        b = astensor(b)
        return _node(a * b.data, [(b, lambda g: g * a)])
    a, b = astensor(a), astensor(b)
    return _node(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def div(a, b) -> Tensor:
    if _is_number(b):
        a = astensor(a)
        inv = 1.0 / b
        return _node(a.data * inv, [(a, lambda g: g * inv)])
    if _is_number(a):
        b = astensor(b)
        out = a / b.data
        return _node(out, [(b, lambda g: -g * out / b.data)])
    a, b = astensor(a), astensor(b)
    out = a.data / b.data
    return _node(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ],
    )


def power(a, exponent: float) -> Tensor:
    a = astensor(a)
    p = float(exponent)
    return _node(
        a.data ** p,
        [(a, lambda g: g * p * a.data ** (p - 1.0))],
    )


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return _node(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = astensor(a)
    return _node(np.log(a.data), [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)
    return _node(out, [(a, lambda g: g * (0.5 / out))])


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def gelu(a) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    a = astensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = x * cdf

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return g * (cdf + x * pdf)

    return _node(out, [(a, back)])


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient is passed through only inside the active range."""
    a = astensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _node(out, [(a, lambda g: g * inside)])


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires at least 2-d operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def back_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def back_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _node(out, [(a, back_a), (b, back_b)])


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis, computed as one flattened GEMM."""
    x = astensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out2 = x2 @ weight.data
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(*lead, weight.shape[1])

    def back_x(g):
        g2 = g.reshape(-1, weight.shape[1])
        return (g2 @ weight.data.T).reshape(x.shape)

    def back_w(g):
        g2 = g.reshape(-1, weight.shape[1])
        return x2.T @ g2

    vjps = [(x, back_x), (weight, back_w)]
    if bias is not None:
        vjps.append((bias, lambda g: g.reshape(-1, weight.shape[1]).sum(axis=0)))
    return _node(out, vjps)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = astensor(a)
    return _node(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = astensor(a)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), [(a, lambda g: g.transpose(inverse))])


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [astensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def make_back(i):
        def back(g):
            return np.split(g, offsets, axis=axis)[i]

        return back

    return _node(out, [(p, make_back(i)) for i, p in enumerate(parts)])


def take_token(x, position: int) -> Tensor:
    """Select one row along the second-to-last axis, e.g. the [CLS] slot."""
    x = astensor(x)
    if x.ndim < 2:
        raise DimensionError(f"take_token needs a sequence axis, got {x.shape}")
    out = x.data[..., position, :]

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., position, :] = g
        return full

    return _node(out, [(x, back)])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a trainable table by integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]

    def back(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return full

    return _node(out, [(table, back)])


# -- reductions and normalizers ----------------------------------------------


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(
        out,
        [(a, lambda g: _restore_axes(g, a.shape, axis, keepdims).copy())],
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else _axis_count(a.shape, axis)

    def back(g):
        return _restore_axes(g, a.shape, axis, keepdims) / count

    return _node(out, [(a, back)])


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; NaN inputs violate the contract."""
    a = astensor(a)
    x = a.data
    if np.isnan(np.min(x)):
        raise ContractError("softmax input contains NaN")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _node(out, [(a, back)])


def logsumexp(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    x = a.data
    if np.isnan(np.min(x)):
        raise ContractError("logsumexp input contains NaN")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis=axis)
    soft = e / s

    def back(g):
        return soft * np.expand_dims(g, axis % x.ndim)

    return _node(out, [(a, back)])


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then rescale."""
    x = astensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def back_x(g):
        gx = g * gain.data
        term = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - term - xhat * proj)

    def back_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def back_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _node(out, [(x, back_x), (gain, back_gain), (bias, back_bias)])


def unit_rows(x, eps: float = 1e-12) -> Tensor:
    """Scale each row of the last axis to unit Euclidean norm."""
    x = astensor(x)
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    return div(x, sqrt(add(sq, eps)))


def cross_entropy_diagonal(logits: Tensor) -> Tensor:
    """Mean of -log softmax(row i) at column i over a square logit matrix.

    This is the in-batch contrastive objective: entry (i, j) scores query i
    against candidate j and the match is on the diagonal.
    """
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise DimensionError(
            f"diagonal cross entropy needs a square matrix, got {logits.shape}"
        )
    lse = logsumexp(logits, axis=1)
    diag = take_diagonal(logits)
    return tmean(sub(lse, diag))


def take_diagonal(x) -> Tensor:
    x = astensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"take_diagonal needs a square matrix, got {x.shape}")
    n = x.shape[0]
    idx = np.arange(n)
    out = x.data[idx, idx]

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx, idx] = g
        return full

    return _node(out, [(x, back)])
