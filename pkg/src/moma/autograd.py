"""Dense n-d tensors with reverse-mode automatic differentiation.

Every differentiable primitive records a node holding its parents and a
closure that maps the output gradient to input gradients. Node ids come
from a global counter, so sorting reachable nodes by id gives a valid
topological order and backward walks them newest-first exactly once.

Training runs in float32; gradient verification switches to float64 with
``default_dtype(np.float64)``.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE: type = np.float32
_NODE_IDS = itertools.count()
_OP_COUNTERS: list[Counter] = []

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


# -- global modes ---------------------------------------------------------


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count multiply-accumulates issued by matmul inside the block.

    Keys: ``"matmul_macs"`` (total) and ``"calls"``.
    """
    counter: Counter = Counter()
    _OP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _OP_COUNTERS.remove(counter)


# -- tensor ---------------------------------------------------------------


class Tensor:
    """n-d real array plus an optional node in the active graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # shape helpers
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

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # operators
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
        out.node_id = next(_NODE_IDS)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph traversal -------------------------------------------------------


class Node(NamedTuple):
    node_id: int
    op: str
    input_ids: tuple[int | None, ...]


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def trace(root: Tensor) -> list[Node]:
    """Graph nodes reachable from ``root`` in construction order."""
    return [Node(t.node_id, t._op, tuple(p.node_id for p in t._parents)) for t in reversed(_reachable(root))]


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every tracked leaf.

    The graph is released afterwards unless ``retain_graph`` is set.
    """
    if loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to an active graph")
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    nodes = _reachable(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    if not retain_graph:
        for node in nodes:
            node._backward = None
            node._parents = ()


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bw, "gelu")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        return unbroadcast(np.where(cond, g, 0), a.shape), unbroadcast(np.where(cond, 0, g), b.shape)

    return _result(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None))) or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from exc
    if _OP_COUNTERS:
        macs = int(np.prod(out.shape)) * a.shape[-1]
        for counter in _OP_COUNTERS:
            counter["matmul_macs"] += macs
            counter["calls"] += 1

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# -- fused normalisation ops ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise IndexError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm affine params {gamma.shape}/{beta.shape} do not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "layer_norm")


# -- indexing ---------------------------------------------------------------


def _check_token_indices(indices, batch: int, tokens: int) -> np.ndarray:
    if isinstance(indices, np.ndarray) and indices.ndim == 2:
        idx = indices.astype(np.int64, copy=False)
    else:
        rows = [np.asarray(r, dtype=np.int64) for r in indices]
        lengths = {len(r) for r in rows}
        if len(lengths) > 1:
            raise ShapeError(f"every sample needs the same index count, got lengths {sorted(lengths)}")
        idx = np.stack(rows) if rows else np.zeros((0, 0), dtype=np.int64)
    if idx.shape[0] != batch:
        raise ShapeError(f"index list covers {idx.shape[0]} samples, tensor has {batch}")
    bad = np.argwhere((idx < 0) | (idx >= tokens))
    if bad.size:
        b, j = bad[0]
        raise IndexError(f"token index {idx[b, j]} out of range [0, {tokens}) in sample {b}")
    return idx


def gather_tokens(x: Tensor, indices) -> Tensor:
    """Select per-sample rows: ``out[b, j] = x[b, indices[b][j]]``.

    ``x`` is [B, N, D]; every sample must list the same number of indices.
    """
    if x.ndim != 3:
        raise ShapeError(f"gather_tokens expects [B, N, D], got {x.shape}")
    batch, tokens, _ = x.shape
    idx = _check_token_indices(indices, batch, tokens)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        rows = np.broadcast_to(np.arange(batch)[:, None], idx.shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _result(out, (x,), bw, "gather_tokens")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), bw, "embedding")


# -- gradient verification ------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    tolerance: float
    message: str = ""
    worst: tuple = field(default_factory=tuple)

    def __bool__(self) -> bool:
        return self.passed


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-5,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    ``f`` is called as ``f(x)`` when ``x`` is a single tensor and as ``f()``
    otherwise; it must return a scalar. Inputs must be float64. With
    ``n_samples`` only a random subset of coordinates is probed.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(x)) if isinstance(x, Tensor) else f
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs; wrap construction in default_dtype(np.float64)")
        t.data = np.ascontiguousarray(t.data)

    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = call()
        if not np.isfinite(out.data).all():
            return GradCheckReport(math.inf, False, 0, tolerance, "non-finite function value")
        backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
        if n_samples is not None and n_samples < len(coords):
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=n_samples, replace=False)
            coords = [coords[k] for k in sorted(pick)]

        worst_err, worst = 0.0, ()
        with no_grad():
            for i, j in coords:
                flat = inputs[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(call().data)
                flat[j] = orig - eps
                fm = float(call().data)
                flat[j] = orig
                numeric = (fp - fm) / (2 * eps)
                a = float(analytic[i].reshape(-1)[j])
                if not (math.isfinite(numeric) and math.isfinite(a)):
                    return GradCheckReport(math.inf, False, len(coords), tolerance, f"non-finite gradient at input {i}[{j}]")
                err = _rel_error(a, numeric, floor)
                if err > worst_err:
                    worst_err, worst = err, (i, j, a, numeric)
        return GradCheckReport(worst_err, worst_err <= tolerance, len(coords), tolerance, worst=worst)
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad, t.grad = rg, g
