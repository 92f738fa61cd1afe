"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive below records, when
gradients are enabled and at least one input requires them, a closure that
maps the output gradient to input gradients. :meth:`Tensor.backward` walks
the resulting graph once in reverse topological order.

Only the primitives needed by the backbone, projection head, distillation
loss and linear probes are provided.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, ParameterError, UsageError

_GRAD_ENABLED = True
_COUNTERS: list["OpCounter"] = []
_STAGES: list[str] = []

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class OpCounter:
    """Accumulates a floating-point operation estimate per primitive and stage."""

    def __init__(self):
        self.by_stage: dict[str, int] = defaultdict(int)
        self.by_op: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, flops: int) -> None:
        stage = _STAGES[-1] if _STAGES else "default"
        self.by_stage[stage] += int(flops)
        self.by_op[op] += int(flops)


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def op_stage(name: str):
    """Label primitives executed inside the block for any active counter."""
    _STAGES.append(name)
    try:
        yield
    finally:
        _STAGES.pop()


def _tally(op: str, flops: int) -> None:
    for c in _COUNTERS:
        c.add(op, flops)


class Tensor:
    """N-dimensional array node in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values; integer input is promoted to float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` on backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operators -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation -------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Without an explicit seed ``self`` must hold exactly one element.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar seed, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the dtype of the other operand under numpy promotion
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _scalar_like(x, ref: Tensor):
    """Python scalars keep the tensor dtype; everything else becomes a Tensor."""
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return Tensor(np.asarray(x, dtype=ref.dtype))
    return as_tensor(x)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _scalar_like(b, a)
    if isinstance(b, Tensor):
        return _scalar_like(a, b), b
    return as_tensor(a), as_tensor(b)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data
    _tally("add", out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data
    _tally("sub", out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    _tally("neg", a.size)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data
    _tally("mul", out.size)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    _tally("div", out.size)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _tally("exp", out.size)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``a + eps``; ``eps`` guards exact zeros."""
    shifted = a.data + eps if eps else a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(shifted)
    _tally("log", out.size)
    return _result(out, (a,), lambda g: (g / shifted,), "log")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = x * cdf
    _tally("gelu", 8 * out.size)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(out, (a,), backward, "gelu")


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc
    _tally("matmul", 2 * out.size * a.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[p.shape for p in parts]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(out, parts, backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward, "slice")


def gather(a: Tensor, indices, axis: int = -1) -> Tensor:
    """``take_along_axis`` with gradient scattered back (duplicates add)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take_along_axis(a.data, idx, axis=axis)
    ax = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _result(out, (a,), backward, "gather")


# -- reductions ----------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    _tally("sum", a.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    _tally("mean", a.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "mean")


# -- normalizations and softmax --------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    _tally("layer_norm", 8 * x.size)

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the Euclidean norm along ``axis`` (floored at ``eps``)."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    _tally("l2_normalize", 4 * x.size)

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        # below the floor the map is linear: x / eps
        active = norm > eps
        return (np.where(active, (g - out * proj) / denom, g / denom),)

    return _result(out, (x,), backward, "l2_normalize")


def softmax_t(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``logits / temperature`` along ``axis`` (max-subtracted)."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _tally("softmax", 5 * out.size)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _result(out, (logits,), backward, "softmax")


# -- checks ------------------------------------------------------------------------

def check_finite(t, where: str = "") -> None:
    """Raise :class:`NumericError` if ``t`` holds NaN or Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"{bad} non-finite value(s){' in ' + where if where else ''}")


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Largest coordinate-wise gap between backprop and central differences.

    The gap is ``|analytic - numeric| / max(1, |analytic|)``. ``fn`` must map a
    tensor to a scalar tensor. Evaluation runs in float64.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    check_finite(out, "grad_check output")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    check_finite(analytic, "analytic gradient")

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(Tensor(x0.copy())).item()
            flat[i] = orig - eps
            down = fn(Tensor(x0.copy())).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite function value near coordinate {i}")
            num_flat[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
