"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap C-contiguous numpy arrays (float32 or float64, one precision
per graph, mixing raises).  Every operation records its inputs and a
backward closure on the output tensor; :func:`backward` replays the
recorded closures over the reachable subgraph in reverse creation order,
which is a valid topological order because an operation always runs after
its inputs were created.  Gradients accumulate additively, so a tensor
used twice receives both contributions.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from . import kernels, rng
from .errors import InputError, PrecisionError, ShapeError, UsageError

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense array plus optional gradient state and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_backward", "_seq")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _inputs: tuple = (), _backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._inputs = _inputs
        self._backward = _backward
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(shape, dtype) -> tuple:
    dims = tuple(int(s) for s in shape)
    for s in dims:
        if s < 1:
            raise ShapeError(f"extents must be >= 1, got {dims}")
    return dims


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (F32, F64):
        raise PrecisionError(f"unsupported precision {dt}; use float32 or float64")
    return dt


def _same_precision(*tensors) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise PrecisionError(f"mixed precisions in one graph: {dt} vs {t.dtype}")
    return dt


def _result(data, inputs, backward_fn) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, True, tuple(inputs), backward_fn)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.ascontiguousarray(g)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# construction


def tensor(data, dtype=F32, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data (copied, C-contiguous)."""
    arr = np.ascontiguousarray(np.array(data, dtype=_check_dtype(dtype)))
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=F32, requires_grad: bool = False) -> Tensor:
    dims = _as_array(shape, dtype)
    return Tensor(np.zeros(dims, dtype=_check_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype=F32, requires_grad: bool = False) -> Tensor:
    dims = _as_array(shape, dtype)
    return Tensor(np.ones(dims, dtype=_check_dtype(dtype)), requires_grad=requires_grad)


def constant(shape, value: float, dtype=F32, requires_grad: bool = False) -> Tensor:
    dims = _as_array(shape, dtype)
    return Tensor(np.full(dims, value, dtype=_check_dtype(dtype)), requires_grad=requires_grad)


def seeded_normal(shape, seed: int, mean: float = 0.0, std: float = 1.0,
                  dtype=F32, requires_grad: bool = False) -> Tensor:
    """Deterministic normal init (Philox-keyed, see :mod:`vitsurgery.rng`)."""
    dims = _as_array(shape, dtype)
    return Tensor(rng.normal(dims, seed, mean, std, _check_dtype(dtype)),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepts a [..., m, k] left operand against a [k, n] right operand, or
    two operands batched over identical leading axes.  Gradient rule:
    d(a.b) = (g.bT, aT.g), with batch axes summed out for an unbatched b.
    """
    dt = _same_precision(a, b)
    ash, bsh = a.shape, b.shape
    if len(ash) < 2 and not (len(ash) == 1 and len(bsh) == 2):
        raise ShapeError(f"matmul left operand needs >= 1 axes against a matrix, got {ash} @ {bsh}")
    if len(bsh) == 2:
        if ash[-1] != bsh[0]:
            raise ShapeError(f"matmul inner dimensions differ: {ash} @ {bsh}")
    elif len(bsh) == len(ash) and len(bsh) > 2:
        if ash[:-2] != bsh[:-2] or ash[-1] != bsh[-2]:
            raise ShapeError(f"batched matmul shapes incompatible: {ash} @ {bsh}")
    else:
        raise ShapeError(f"matmul right operand must be a matrix or match batch axes: {ash} @ {bsh}")

    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        if len(bsh) == 2:
            if a.requires_grad:
                _accumulate(a, np.matmul(g, b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                a2 = a.data.reshape(-1, ash[-1]) if len(ash) > 1 else a.data.reshape(1, -1)
                g2 = g.reshape(-1, bsh[-1])
                _accumulate(b, a2.T @ g2)
        else:
            if a.requires_grad:
                _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(np.ascontiguousarray(out.astype(dt, copy=False)), (a, b), backward_fn)


def _coerce_operand(b, dtype):
    if isinstance(b, Tensor):
        return b
    return Tensor(np.asarray(b, dtype=dtype))


def _check_trailing_broadcast(ash, bsh):
    if len(bsh) > len(ash):
        raise ShapeError(f"operand of shape {bsh} has more axes than {ash}")
    for sa, sb in zip(reversed(ash), reversed(bsh)):
        if sb != sa and sb != 1:
            raise ShapeError(f"shape {bsh} does not broadcast along trailing axes of {ash}")


def _reduce_to_shape(g, shape):
    """Sum a full-shaped gradient down to a trailing-broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    collapse = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if collapse:
        g = g.sum(axis=collapse, keepdims=True)
    return np.ascontiguousarray(g)


def add(a: Tensor, b) -> Tensor:
    b = _coerce_operand(b, a.dtype)
    dt = _same_precision(a, b)
    _check_trailing_broadcast(a.shape, b.shape)

    def backward_fn(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g, b.data.shape))

    return _result((a.data + b.data).astype(dt, copy=False), (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce_operand(b, a.dtype)
    dt = _same_precision(a, b)
    _check_trailing_broadcast(a.shape, b.shape)

    def backward_fn(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -_reduce_to_shape(g, b.data.shape))

    return _result((a.data - b.data).astype(dt, copy=False), (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce_operand(b, a.dtype)
    dt = _same_precision(a, b)
    _check_trailing_broadcast(a.shape, b.shape)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, _reduce_to_shape(g * a.data, b.data.shape))

    return _result((a.data * b.data).astype(dt, copy=False), (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        _accumulate(a, g * np.asarray(c, dtype=a.dtype))

    return _result((a.data * np.asarray(c, dtype=a.dtype)), (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    dims = tuple(int(s) for s in shape)
    if int(np.prod(dims, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {dims}")

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _result(np.ascontiguousarray(a.data.reshape(dims)), (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(len(a.shape))):
        raise ShapeError(f"axes {axes} are not a permutation of {a.shape}")
    inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward_fn)


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    dt = _same_precision(*tensors)
    nd = len(tensors[0].shape)
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"concat axis {axis} invalid for rank {nd}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * nd
            index[ax] = slice(lo, hi)
            _accumulate(t, np.ascontiguousarray(g[tuple(index)]))

    data = np.concatenate([t.data for t in tensors], axis=ax).astype(dt, copy=False)
    return _result(np.ascontiguousarray(data), tuple(tensors), backward_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = len(a.shape)
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"slice axis {axis} invalid for rank {nd}")
    if not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {a.shape[ax]}")
    index = [slice(None)] * nd
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros(a.data.shape, dtype=a.dtype)
        full[index] = g
        _accumulate(a, full)

    return _result(np.ascontiguousarray(a.data[index]), (a,), backward_fn)


def broadcast_leading(a: Tensor, n: int) -> Tensor:
    """Prepend an axis of extent n by repetition; gradient sums it out."""
    if n < 1:
        raise ShapeError(f"leading extent must be >= 1, got {n}")

    def backward_fn(g):
        _accumulate(a, g.sum(axis=0))

    data = np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.data.shape))
    return _result(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and reductions (kernel-backed)


def softmax(x: Tensor, axis: int) -> Tensor:
    nd = len(x.shape)
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"softmax axis {axis} invalid for rank {nd}")
    moved = np.ascontiguousarray(np.moveaxis(x.data, ax, -1))
    rows = moved.reshape(-1, moved.shape[-1])
    y2 = kernels.softmax_forward(rows)

    def backward_fn(g):
        gmoved = np.ascontiguousarray(np.moveaxis(g, ax, -1))
        gx = kernels.softmax_backward(y2, gmoved.reshape(-1, moved.shape[-1]))
        gx = np.moveaxis(gx.reshape(moved.shape), -1, ax)
        _accumulate(x, np.ascontiguousarray(gx))

    data = np.ascontiguousarray(np.moveaxis(y2.reshape(moved.shape), -1, ax))
    return _result(data, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    if eps <= 0:
        raise InputError(f"layer_norm eps must be > 0, got {eps}")
    dt = _same_precision(x, gamma, beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"gamma/beta must have shape ({width},), got {gamma.shape} and {beta.shape}")
    rows = x.data.reshape(-1, width)
    y2, mean, rstd = kernels.layer_norm_forward(rows, gamma.data, beta.data, float(eps))

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.reshape(-1, width))
        gx, ggamma, gbeta = kernels.layer_norm_backward(g2, rows, mean, rstd, gamma.data)
        _accumulate(x, gx.reshape(x.data.shape))
        _accumulate(gamma, ggamma)
        _accumulate(beta, gbeta)

    return _result(y2.reshape(x.data.shape).astype(dt, copy=False), (x, gamma, beta), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU; the tanh approximation is deliberately not used."""
    flat = x.data.reshape(-1)
    y, cdf = kernels.gelu_forward(flat)

    def backward_fn(g):
        gx = kernels.gelu_backward(flat, cdf, np.ascontiguousarray(g.reshape(-1)))
        _accumulate(x, gx.reshape(x.data.shape))

    return _result(y.reshape(x.data.shape), (x,), backward_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if len(logits.shape) != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    n, c = logits.shape
    lab = np.ascontiguousarray(np.asarray(labels, dtype=np.int64))
    if lab.shape != (n,):
        raise InputError(f"labels must be a flat list of length {n}, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{lab.min()}, {lab.max()}]")
    loss, probs = kernels.cross_entropy_forward(logits.data, lab)

    def backward_fn(g):
        gscale = np.asarray(g).item() / n
        _accumulate(logits, kernels.cross_entropy_backward(probs, lab, gscale))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(x, np.full(x.data.shape, np.asarray(g).item(), dtype=x.dtype))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.shape != ():
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not require grad; nothing to differentiate")

    # collect the reachable subgraph, then replay in reverse creation order
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._inputs)

    loss.grad = np.ones((), dtype=loss.dtype)
    for t in sorted(nodes, key=lambda n: n._seq, reverse=True):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
