"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op that touches a tensor requiring gradients records a backward rule on
its output.  Outputs carry a monotonically increasing sequence number, so the
set of recorded ops reachable from a loss, sorted by that number, is the tape
in recording order; :func:`backward` walks it in exact reverse.  Once walked,
the tape is released and a second :func:`backward` on the same loss raises
:class:`TapeConsumed`.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .errors import (
    EmptySegment,
    IndexOutOfRange,
    NondeterministicFunction,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

_seq = itertools.count()
_grad_enabled = True

# how many empty segments softmax_segmented has seen (diagnostic only)
empty_segment_count = 0


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_released")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._released = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record(
        data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record(
        data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_cols(a, start, stop):
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.data[:, start:stop], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _record(data, tuple(tensors), backward)


def concat_rows(tensors):
    return concat(tensors, axis=0)


def concat_cols(tensors):
    return concat(tensors, axis=1)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), backward)


def mean(a, axis=None):
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _record(a.data * scale, (a,), lambda g: (g * scale,))


def elu(a, alpha=1.0):
    mask = a.data > 0
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(mask, a.data, neg)
    return _record(out, (a,), lambda g: (g * np.where(mask, 1.0, neg + alpha),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "elu": elu,
    "relu": relu,
    "gelu": gelu,
}


def row_scale(x, v):
    """Multiply row ``i`` of ``x`` by ``v[i]``."""
    x, v = as_tensor(x), as_tensor(v)
    if v.ndim != 1 or v.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"row_scale of {x.shape} by {v.shape}")
    return _record(
        x.data * v.data[:, None],
        (x, v),
        lambda g: (g * v.data[:, None], np.einsum("ij,ij->i", g, x.data)),
    )


def _scatter_rows(g, idx, n):
    """Sum rows of ``g`` into an (n, ...) array at positions ``idx``."""
    flat = g.reshape(len(idx), -1)
    m = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(m @ flat).reshape((n,) + g.shape[1:])


def gather_rows(x, idx):
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if len(idx) and (idx.min() < -n or idx.max() >= n):
        raise IndexOutOfRange(f"row index out of range for {n} rows")
    idx = np.where(idx < 0, idx + n, idx)
    return _record(x.data[idx], (x,), lambda g: (_scatter_rows(g, idx, n),))


def pick(x, cols):
    """``x[i, cols[i]]`` for every row."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, cols] = g
        return (out,)

    return _record(x.data[rows, cols], (x,), backward)


# ---------------------------------------------------------------------------
# segmented and sparse primitives


def _segment_bounds(segment_ids, num_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    if len(seg) and (seg[0] < 0 or np.any(np.diff(seg) < 0)):
        raise ShapeMismatch("segment ids must be sorted and non-negative")
    if len(seg) and seg[-1] >= num_segments:
        raise IndexOutOfRange("segment id exceeds num_segments")
    counts = np.bincount(seg, minlength=num_segments)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return seg, counts, starts


def softmax_segmented(values, segment_ids, num_segments=None, empty="zero"):
    """Softmax of a 1-D tensor within each run of equal (sorted) segment ids.

    Segments with no members contribute no output; they are counted in
    ``empty_segment_count``, or raise :class:`EmptySegment` when
    ``empty="raise"``.
    """
    global empty_segment_count
    values = as_tensor(values)
    if num_segments is None:
        num_segments = int(segment_ids[-1]) + 1 if len(segment_ids) else 0
    seg, counts, starts = _segment_bounds(segment_ids, num_segments)
    n_empty = int(np.sum(counts == 0))
    if n_empty:
        if empty == "raise":
            raise EmptySegment(f"{n_empty} segment(s) have no members")
        empty_segment_count += n_empty
    if len(seg) == 0:
        return _record(np.zeros(0), (values,), lambda g: (np.zeros(0),))
    present = counts > 0
    seg_max = np.full(num_segments, -np.inf)
    seg_max[present] = np.maximum.reduceat(values.data, starts[present])
    e = np.exp(values.data - seg_max[seg])
    denom = np.zeros(num_segments)
    denom[present] = np.add.reduceat(e, starts[present])
    out = e / denom[seg]

    def backward(g):
        dot = np.zeros(num_segments)
        dot[present] = np.add.reduceat(g * out, starts[present])
        return (out * (g - dot[seg]),)

    return _record(out, (values,), backward)


def _sum_runs(values, keys, num):
    """Row sums of ``values`` grouped by sorted integer ``keys`` into ``num`` rows."""
    out = np.zeros((num,) + values.shape[1:])
    if len(keys):
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        out[keys[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def segment_sum(x, segment_ids, num_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    if len(seg) and np.any(np.diff(seg) < 0):
        raise ShapeMismatch("segment ids must be sorted")
    return _record(_sum_runs(x.data, seg, num_segments), (x,), lambda g: (g[seg],))


def segment_mean(x, segment_ids, num_segments):
    counts = np.bincount(np.asarray(segment_ids, dtype=np.int64), minlength=num_segments)
    return row_scale(segment_sum(x, segment_ids, num_segments), 1.0 / np.maximum(counts, 1))


def segment_max(x, segment_ids, num_segments):
    """Column-wise max per segment; the gradient goes to the first maximal row."""
    seg, counts, starts = _segment_bounds(segment_ids, num_segments)
    if np.any(counts == 0):
        raise EmptySegment("segment_max over an empty segment")
    out = np.maximum.reduceat(x.data, starts, axis=0)
    f = x.shape[1]
    hit = x.data == out[seg]
    # first row in each segment attaining the max, per column
    pos = np.where(hit, np.arange(len(seg))[:, None], len(seg))
    first = np.minimum.reduceat(pos, starts, axis=0)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[first.ravel(), np.tile(np.arange(f), num_segments)] = g.ravel()
        return (gx,)

    return _record(out, (x,), backward)


def mean_rows(x):
    return segment_mean(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def max_rows(x):
    return segment_max(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def spmm(edges, values, x, n=None):
    """``out[i] = sum over (i, j) in edges of values[(i, j)] * x[j]``.

    Edge lists sorted by row (the layout every graph here uses) are reduced
    with ``np.add.reduceat``; anything else goes through a CSR product.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    values, x = as_tensor(values), as_tensor(x)
    if n is None:
        n = x.shape[0]
    if len(edges) and (edges.min() < 0 or edges[:, 0].max() >= n or edges[:, 1].max() >= x.shape[0]):
        raise IndexOutOfRange("edge index out of range in spmm")
    if values.shape != (len(edges),):
        raise ShapeMismatch(f"{values.shape} edge values for {len(edges)} edges")
    rows, cols = edges[:, 0], edges[:, 1]
    if len(rows) and np.any(np.diff(rows) < 0):
        m = sp.csr_matrix((values.data, (rows, cols)), shape=(n, x.shape[0]))
        out = np.asarray(m @ x.data)
    else:
        out = _sum_runs(values.data[:, None] * x.data[cols], rows, n)
    by_col = np.argsort(cols, kind="stable")

    def backward(g):
        gv = np.einsum("ij,ij->i", g[rows], x.data[cols])
        contrib = values.data[by_col, None] * g[rows[by_col]]
        return gv, _sum_runs(contrib, cols[by_col], x.shape[0])

    return _record(out, (values, x), backward)


# ---------------------------------------------------------------------------
# normalization and output


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization over the feature axis with a learnable affine."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[1]

    def backward(g):
        gh = g * gain.data
        gx = inv / d * (d * gh - gh.sum(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), backward)


def batch_norm(x, gamma, beta, eps=1e-5, running=None):
    """Per-column normalization.

    With ``running=None`` batch statistics are used and returned alongside the
    output as ``(out, mean, biased_var)``.  Otherwise ``running`` is a
    ``(mean, var)`` pair and only the output is returned.
    """
    if running is not None:
        mu, var = running
        inv = 1.0 / np.sqrt(var + eps)
        out = (x.data - mu) * inv * gamma.data + beta.data

        def backward_eval(g):
            return g * inv * gamma.data, (g * (x.data - mu) * inv).sum(axis=0), g.sum(axis=0)

        return _record(out, (x, gamma, beta), backward_eval)

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv / n * (n * gh - gh.sum(axis=0) - xhat * (gh * xhat).sum(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gamma, beta), backward), mu, var


def log_softmax(x):
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss, accumulate=False, retain=False):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients are overwritten unless ``accumulate`` is set.  The tape is
    released afterwards unless ``retain`` is set.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise TapeConsumed("backward() already ran on this loss")
    if not loss.requires_grad:
        raise TapeConsumed("loss does not depend on any tensor requiring gradients")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        if t._released:
            raise TapeConsumed("part of this graph was released by an earlier backward()")
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if accumulate and t.grad is not None:
                t.grad = t.grad + g
            else:
                t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    if not retain:
        for t in order:
            if t._backward is not None:
                t._backward = None
                t._parents = ()
                t._released = True
        loss._released = True
    return loss


def grad_check(f, x, eps=1e-5):
    """Largest relative gap between analytic and central-difference gradients.

    ``x`` is a tensor, or a list of tensors passed positionally to ``f``.  The
    error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = list(x) if isinstance(x, (list, tuple)) else [x]

    def call():
        return f(*xs)

    with no_grad():
        first = call().data.copy()
        second = call().data.copy()
    if not np.array_equal(first, second):
        raise NondeterministicFunction("two evaluations at the same point differ")

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = call()
    if out.data.size != 1:
        raise NonScalarLoss("grad_check needs a scalar function")
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(call().data)
                flat[k] = orig - eps
                down = float(call().data)
                flat[k] = orig
                num = (up - down) / (2.0 * eps)
                ana = float(a.reshape(-1)[k])
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
    for t, flag in zip(xs, saved):
        t.requires_grad = flag
        t.grad = None
    return worst
