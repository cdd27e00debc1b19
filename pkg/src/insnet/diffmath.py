"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Graphs are built define-by-run: every operation executed while a :class:`Tape`
is active and touching a trainable input is recorded, and :func:`backward`
replays the records in reverse.  Outside a tape, operations just compute
values, which is what inference paths use.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffArray",
    "Tape",
    "DimensionError",
    "InvalidMaskError",
    "ParameterError",
    "BackwardError",
    "param",
    "constant",
    "precision",
    "get_dtype",
    "set_precision",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "gelu",
    "tanh",
    "dropout",
    "layer_norm",
    "concat",
    "concat_last_dim",
    "gather_rows",
    "take_along_last",
    "embedding_lookup",
    "masked_softmax",
    "cross_entropy_from_logits",
    "reshape",
    "transpose",
    "sum",
    "backward",
]


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64, "f32": np.float32, "f64": np.float64}
_local = threading.local()


def _dtype_name(name: str) -> type:
    try:
        return _DTYPES[name]
    except KeyError:
        raise ParameterError(f"unknown precision mode {name!r}; use float32 or float64") from None


def get_dtype():
    return getattr(_local, "dtype", np.float64)


def set_precision(name: str) -> None:
    _local.dtype = _dtype_name(name)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created arrays."""
    previous = get_dtype()
    _local.dtype = _dtype_name(name)
    try:
        yield
    finally:
        _local.dtype = previous


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for a single forward/backward episode.

    Use as a context manager; operations executed inside are recorded in
    execution order, which is a topological order by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._previous = None

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "DiffArray", inputs: tuple, backward_fn: Callable) -> None:
        node = _Node(out, inputs, backward_fn)
        out._node = node
        out._tape = self
        self.nodes.append(node)

    def backward(self, loss: "DiffArray") -> None:
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise BackwardError("backward() already ran on this tape; build a new graph first")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        # drop references so activations can be freed
        self.nodes = []


class DiffArray:
    """A numpy array that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "trainable", "requires_grad", "name", "_node", "_tape")
    __array_priority__ = 1000

    def __init__(self, value, trainable: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype if dtype is not None else get_dtype())
        self.value = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return sum(self, axis)


def param(values, name: str | None = None, dtype=None) -> DiffArray:
    """Trainable leaf."""
    return DiffArray(np.array(values, dtype=dtype if dtype is not None else get_dtype()), trainable=True, name=name, dtype=dtype)


def constant(values, dtype=None) -> DiffArray:
    return DiffArray(values, trainable=False, dtype=dtype)


def _wrap(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype if dtype is not None else get_dtype()))


def _result(value: np.ndarray, inputs: tuple, backward_fn: Callable) -> DiffArray:
    out = DiffArray.__new__(DiffArray)
    out.value = value
    out.grad = None
    out.trainable = False
    out.name = None
    out._node = None
    out._tape = None
    needs = any(i.requires_grad for i in inputs)
    out.requires_grad = needs
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
        else:
            out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> DiffArray:
    """Matrix product; leading dims are batch dims and may broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    out = np.matmul(av, bv)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if av.ndim > 2 and bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _result(out, (a, b), backward_fn)


def add(a, b) -> DiffArray:
    a = _wrap(a, b if isinstance(b, DiffArray) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    try:
        out = a.value + b.value
    except ValueError:
        raise DimensionError(f"add shape mismatch: {sa} + {sb}") from None

    def backward_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(out, (a, b), backward_fn)


def sub(a, b) -> DiffArray:
    a = _wrap(a, b if isinstance(b, DiffArray) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    try:
        out = a.value - b.value
    except ValueError:
        raise DimensionError(f"sub shape mismatch: {sa} - {sb}") from None

    def backward_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(out, (a, b), backward_fn)


def mul(a, b) -> DiffArray:
    a = _wrap(a, b if isinstance(b, DiffArray) else None)
    b = _wrap(b, a)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def backward_fn(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward_fn)


def scale(x, c: float) -> DiffArray:
    x = _wrap(x)
    c = float(c)
    out = x.value * x.value.dtype.type(c)
    return _result(out, (x,), lambda g: (g * g.dtype.type(c),))


def neg(x) -> DiffArray:
    return scale(x, -1.0)


# ---------------------------------------------------------------- nonlinearities


def relu(x) -> DiffArray:
    x = _wrap(x)
    keep = x.value > 0
    return _result(np.where(keep, x.value, 0).astype(x.dtype), (x,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> DiffArray:
    """GeLU, tanh approximation."""
    x = _wrap(x)
    v = x.value
    c = v.dtype.type(_GELU_C)
    k = v.dtype.type(0.044715)
    inner = c * (v + k * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward_fn(g):
        dinner = c * (1.0 + 3.0 * k * (v * v))
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return _result(out.astype(v.dtype, copy=False), (x,), backward_fn)


def tanh(x) -> DiffArray:
    x = _wrap(x)
    t = np.tanh(x.value)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> DiffArray:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.value * keep, (x,), lambda g: (g * keep,))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward_fn(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gain, bias), backward_fn)


# ---------------------------------------------------------------- structural ops


def concat(xs: Sequence, axis: int = -1) -> DiffArray:
    xs = tuple(_wrap(x) for x in xs)
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, xs, backward_fn)


def concat_last_dim(xs: Sequence) -> DiffArray:
    return concat(xs, axis=-1)


def gather_rows(x, indices) -> DiffArray:
    """``x[indices]`` along axis 0 (indices may be any integer array)."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    out = x.value[idx]

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, (x,), backward_fn)


def embedding_lookup(table, ids) -> DiffArray:
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return gather_rows(table, ids)


def take_along_last(x, idx) -> DiffArray:
    """``out[..., k] = x[..., idx[..., k]]`` with idx broadcast over x's leading dims."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    m = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"take_along_last index out of range [0, {m})")
    lead = np.broadcast_shapes(x.shape[:-1], idx.shape[:-1])
    xb = np.broadcast_to(x.value, lead + (m,))
    ib = np.broadcast_to(idx, lead + idx.shape[-1:])
    out = np.take_along_axis(xb, ib, axis=-1)
    xshape = x.shape

    def backward_fn(g):
        rows = int(np.prod(lead, dtype=np.int64))
        flat = (np.arange(rows, dtype=np.int64)[:, None] * m + ib.reshape(rows, -1)).ravel()
        acc = np.bincount(flat, weights=g.reshape(-1), minlength=rows * m)
        gx = acc.reshape(lead + (m,)).astype(g.dtype, copy=False)
        return (_unbroadcast(gx, xshape),)

    return _result(out, (x,), backward_fn)


def _getitem(x: DiffArray, key) -> DiffArray:
    out = x.value[key]

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(out, copy=True), (x,), backward_fn)


def reshape(x, shape) -> DiffArray:
    x = _wrap(x)
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> DiffArray:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


def sum(x, axis=None) -> DiffArray:  # mirrors numpy naming
    x = _wrap(x)
    shape = x.shape
    out = np.asarray(x.value.sum(axis=axis))

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------- probabilistic ops


def _check_mask(mask: np.ndarray) -> None:
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("attention/softmax mask has a fully masked row")


def masked_softmax(logits, mask=None) -> DiffArray:
    """Softmax over the last axis; masked entries are exactly zero."""
    logits = _wrap(logits)
    v = logits.value
    if mask is None:
        m = None
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        _check_mask(m)
        filled = np.where(m, v, -np.inf)
        shifted = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0).astype(v.dtype, copy=False)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward_fn)


def log_softmax_np(v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Plain numpy masked log-softmax (masked entries are -inf)."""
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    m = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    _check_mask(m)
    filled = np.where(m, v, -np.inf)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.where(m, np.exp(shifted), 0.0).sum(axis=-1, keepdims=True))


def cross_entropy_from_logits(logits, target, mask=None) -> DiffArray:
    """Per-row ``-log softmax(logits)[target]`` over the last axis.

    ``target`` has the shape of ``logits`` without its last axis; an optional
    boolean ``mask`` restricts the softmax support.
    """
    logits = _wrap(logits)
    v = logits.value
    vocab = v.shape[-1]
    t = np.asarray(target, dtype=np.int64)
    if t.shape != v.shape[:-1]:
        raise DimensionError(f"target shape {t.shape} does not match logits {v.shape}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    logp = log_softmax_np(v, mask)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    if not np.all(np.isfinite(picked)):
        raise InvalidMaskError("cross-entropy target falls on a masked entry")
    out = -picked

    def backward_fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        return ((p - onehot) * g[..., None],)

    return _result(out.astype(v.dtype, copy=False), (logits,), backward_fn)


def backward(loss: DiffArray) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise BackwardError("loss is not connected to any trainable array on a tape")
    loss._tape.backward(loss)


def zero_grads(params: Iterable[DiffArray]) -> None:
    for p in params:
        p.grad = None
