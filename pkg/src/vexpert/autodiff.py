"""Dense fp64 tensors with define-by-run reverse-mode differentiation.

Every primitive records one node on the active :class:`Tape` when at least
one operand requires a gradient. ``backward`` replays the tape in reverse,
so a tensor's gradient is complete by the time its producing node is reached.

Broadcasting is deliberately narrow: operands must have equal shapes, one
must be a scalar, or the shorter shape must equal the trailing extents of the
longer one. Anything else raises :class:`ShapeError`; use ``expand_last`` to
broadcast along a new trailing axis explicitly.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager to make it the active tape of the current thread.
    After ``backward`` the tape is consumed; recording a new operation on it
    starts a fresh generation and drops the old nodes.
    """

    def __init__(self):
        self._nodes = []
        self._state = "open"
        self.generation = 0

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, parents, backward_fn):
        if self._state != "open":
            self._nodes = []
            self._state = "open"
            self.generation += 1
        out._tape = self
        out._gen = self.generation
        out._node = len(self._nodes)
        self._nodes.append((out, parents, backward_fn))

    def clear(self):
        """Free all cached values. A cleared tape rejects ``backward``."""
        self._nodes = []
        self._state = "cleared"

    def reset(self):
        self._nodes = []
        self._state = "open"
        self.generation += 1

    def owns(self, t):
        return t._tape is self and t._gen == self.generation and self._state != "cleared"

    def backward(self, loss):
        if loss.data.shape != () and loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._state == "cleared":
            raise ContractError("backward() on a cleared tape")
        if self._state == "consumed":
            raise ContractError("backward() already ran on this tape; reset it before reuse")
        if not self.owns(loss):
            raise ContractError("loss was not produced on the active tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._nodes[: loss._node + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if self.owns(p) and p._node < out._node:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        self._state = "consumed"


_local = threading.local()


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = [Tape()]
    return st


def current_tape():
    return _stack()[-1]


class no_grad:
    """Context in which no operation is recorded, e.g. for inference."""

    def __enter__(self):
        self._prev = getattr(_local, "disabled", False)
        _local.disabled = True
        return self

    def __exit__(self, *exc):
        _local.disabled = self._prev
        return False


def grad_enabled():
    return not getattr(_local, "disabled", False)


class Tensor:
    """An n-dimensional fp64 array that may participate in the tape."""

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_gen", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._gen = -1
        self._node = -1

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._gen = -1
        t._node = -1
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        tape = self._tape if self._tape is not None else current_tape()
        tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: negate(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Wrap an op result; record it only when some parent needs a gradient."""
    needs = any(p.requires_grad for p in parents) and grad_enabled()
    out = Tensor._wrap(data, needs)
    if needs:
        current_tape().record(out, parents, backward_fn)
    return out


def _check_broadcast(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def negate(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = expit(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def clamp_min(a, lo):
    a = as_tensor(a)
    x = a.data
    keep = x >= lo
    return _make(np.maximum(x, lo), (a,), lambda g: (g * keep,))


def smooth_l1_elementwise(d, delta=1.0):
    """0.5 d^2 / delta inside the threshold, |d| - delta/2 outside."""
    d = as_tensor(d)
    x = d.data
    inside = np.abs(x) < delta
    out = np.where(inside, 0.5 * x * x / delta, np.abs(x) - 0.5 * delta)
    return _make(out, (d,), lambda g: (g * np.where(inside, x / delta, np.sign(x)),))


# ----------------------------------------------------------------- reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product. ``b`` is 2-D (shared across any leading axes of ``a``)
    or has the same leading axes as ``a`` (batched product)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax of NaN")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward)


# ------------------------------------------------------------------ structure


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_last(a, start, stop):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop].copy(), (a,), backward)


def expand_last(a, d):
    """Repeat ``a`` along a new trailing axis of length ``d``."""
    a = as_tensor(a)
    out = np.repeat(a.data[..., None], d, axis=-1)
    return _make(out, (a,), lambda g: (g.sum(axis=-1),))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack of mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(
        out,
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def _check_indices(indices, n):
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return idx


def gather_rows(x, indices):
    x = as_tensor(x)
    idx = _check_indices(indices, x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def scatter_add_rows(x, indices, n_rows):
    """Accumulate row ``k`` of ``x`` into row ``indices[k]`` of a zero array."""
    x = as_tensor(x)
    idx = _check_indices(indices, n_rows)
    if len(idx) != x.shape[0]:
        raise ShapeError(f"{len(idx)} indices for {x.shape[0]} rows")
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, idx, x.data)
    return _make(out, (x,), lambda g: (g[idx],))


def straight_through(hard, soft):
    """Forward value ``hard``; the backward pass routes the gradient to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight-through shapes {hard.shape} vs {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,))


def dropout(a, p, rng, train):
    """Inverted dropout; identity outside training."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor._wrap(mask))
