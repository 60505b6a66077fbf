"""Dense float64 numerics and a small reverse-mode gradient tape.

Every op in this module is polymorphic: called on plain ``numpy`` arrays it
just computes the value, called with at least one :class:`Var` it also records
a node on that variable's :class:`Tape`.  Model code is written once and runs
both for inference (arrays in, arrays out) and for training.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, StateError

EPS = 1e-8


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # ndarray <op> Var must defer to the reflected op on Var

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Linear record of primitive operations for one forward/backward pass.

    A tape is single-use: after :meth:`backward` it refuses further work.
    """

    def __init__(self):
        self._parents = []
        self._vjps = []
        self._shapes = []
        self.params = {}
        self._finished = False

    def __len__(self):
        return len(self._vjps)

    def param(self, name, value):
        if name in self.params:
            raise StateError(f"parameter {name!r} registered twice")
        var = self._push(np.array(value, dtype=np.float64), (), None)
        self.params[name] = var
        return var

    def _push(self, value, parents, vjp):
        if self._finished:
            raise StateError("tape already consumed by backward()")
        var = Var(value, self, len(self._vjps))
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return var

    def backward(self, loss):
        """Return ``{name: d loss / d param}`` for every registered parameter."""
        if self._finished:
            raise StateError("backward() already ran on this tape")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise StateError("loss was not produced by a forward pass on this tape")
        if loss.value.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.value.shape}")
        self._finished = True
        adj = [None] * (loss.index + 1)
        adj[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if parent is None or pg is None:
                    continue
                j = parent.index
                adj[j] = pg if adj[j] is None else adj[j] + pg
        grads = {}
        for name, var in self.params.items():
            g = adj[var.index] if var.index <= loss.index else None
            grads[name] = np.zeros(var.value.shape) if g is None else np.asarray(g, dtype=np.float64)
        return grads


def backward(tape, loss):
    return tape.backward(loss)


# -- plumbing ---------------------------------------------------------------

def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _record(out, inputs, vjp):
    tape = _tape_of(inputs)
    if tape is None:
        return out
    parents = tuple(a if isinstance(a, Var) else None for a in inputs)
    return tape._push(np.asarray(out, dtype=np.float64), parents, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# -- elementwise ------------------------------------------------------------

def add(a, b):
    sa, sb = _shape(a), _shape(b)
    return _record(value(a) + value(b), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    sa, sb = _shape(a), _shape(b)
    return _record(value(a) - value(b), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    return _record(va * vb, (a, b),
                   lambda g: (_unbroadcast(g * vb, np.shape(va)), _unbroadcast(g * va, np.shape(vb))))


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / vb, np.shape(va)),
                              _unbroadcast(-g * out / vb, np.shape(vb))))


def neg(a):
    return _record(-value(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(value(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    va = value(a)
    return _record(np.log(va), (a,), lambda g: (g / va,))


def tanh(a):
    out = np.tanh(value(a))
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    va = value(a)
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(va))
    out = np.where(va >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    va = value(a)
    on = va > 0
    return _record(np.where(on, va, 0.0), (a,), lambda g: (g * on,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    sa, sb = _shape(a), _shape(b)
    return _record(np.where(cond, value(a), value(b)), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# -- shape ops --------------------------------------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    if np.ndim(va) == 0 or np.ndim(vb) == 0:
        raise DimensionError("matmul needs at least 1-D operands")
    ka = np.shape(va)[-1]
    kb = np.shape(vb)[-2] if np.ndim(vb) >= 2 else np.shape(vb)[0]
    if ka != kb:
        raise DimensionError(f"matmul shape mismatch: {np.shape(va)} x {np.shape(vb)}")
    out = np.matmul(va, vb)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return out
    if np.ndim(va) < 2 or np.ndim(vb) < 2:
        raise DimensionError("differentiable matmul needs operands with ndim >= 2")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(vb, -1, -2))
        gb = np.matmul(np.swapaxes(va, -1, -2), g)
        return _unbroadcast(ga, np.shape(va)), _unbroadcast(gb, np.shape(vb))

    return _record(out, (a, b), vjp)


def transpose(a, axis1=-1, axis2=-2):
    return _record(np.swapaxes(value(a), axis1, axis2), (a,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape):
    old = _shape(a)
    return _record(np.reshape(value(a), shape), (a,), lambda g: (np.reshape(g, old),))


def expand_dims(a, axis):
    old = _shape(a)
    return _record(np.expand_dims(value(a), axis), (a,), lambda g: (np.reshape(g, old),))


def getitem(a, idx):
    va = value(a)

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, idx, g)
        return (out,)

    return _record(va[idx], (a,), vjp)


def take_rows(table, indices):
    """Gather rows ``table[indices]`` (embedding lookup)."""
    vt = value(table)
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(vt)
        np.add.at(out, indices, g)
        return (out,)

    return _record(vt[indices], (table,), vjp)


def stack(items, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _record(out, tuple(items), vjp)


# -- reductions -------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = value(a)
    shape = np.shape(va)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(va, axis=axis, keepdims=keepdims), (a,), vjp)


def safe_norm(a, axis=-1, eps=EPS, keepdims=True):
    """``max(||a||_2, eps)`` along ``axis``; zero gradient on the clamped branch."""
    va = value(a)
    raw = np.sqrt(np.sum(va * va, axis=axis, keepdims=True))
    live = raw >= eps
    clamped = np.where(live, raw, eps)
    out = clamped if keepdims else np.squeeze(clamped, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(live, g * va / clamped, 0.0),)

    return _record(out, (a,), vjp)


def _mask_or_true(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; masked-out entries get exactly zero weight."""
    va = value(a)
    m = _mask_or_true(mask, va.shape)
    shifted = np.where(m, va, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(m, np.exp(np.where(m, va, 0.0) - top), 0.0)
    z = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (a,), vjp)


def logsumexp(a, axis=-1, mask=None):
    """Max-shifted ``log(sum(exp(a)))`` over unmasked entries (axis dropped)."""
    va = value(a)
    m = _mask_or_true(mask, va.shape)
    top = np.max(np.where(m, va, -np.inf), axis=axis, keepdims=True)
    e = np.where(m, np.exp(np.where(m, va, top) - top), 0.0)
    z = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(top + np.log(z), axis=axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * e / z,)

    return _record(out, (a,), vjp)


def amax(a, axis=-1, mask=None):
    """Maximum over unmasked entries; gradient goes to the first arg-max only."""
    va = value(a)
    m = _mask_or_true(mask, va.shape)
    filled = np.where(m, va, -np.inf)
    idx = np.argmax(filled, axis=axis)
    out = np.squeeze(np.take_along_axis(va, np.expand_dims(idx, axis), axis=axis), axis=axis)

    def vjp(g):
        grad = np.zeros_like(va)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(out, (a,), vjp)


# -- plain vector helpers ---------------------------------------------------

def softmax_scaled(x, lam):
    """Softmax of ``lam * x`` for a 1-D vector, max-shifted."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax of an empty vector")
    if not lam > 0:
        raise DomainError(f"inverse temperature must be positive, got {lam}")
    z = lam * x
    e = np.exp(z - z.max())
    return e / e.sum()


def l2_normalize(x, eps=EPS):
    x = np.asarray(x, dtype=np.float64)
    return x / max(float(np.linalg.norm(x)), eps)
