"""Differentiable ops over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .rng import RngState
from .tensor import DimensionError, Tensor, as_tensor, make, save


class EmptySupportError(ValueError):
    """A reduction received only masked (-inf) entries."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(a, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make(ad * bd, (a, b), backward, "mul")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make(np.where(pos, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                lambda g: (g * pos,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)) = -softplus(-a), stable for large |a|."""
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    # d/da log sigmoid(a) = sigmoid(-a)
    return make(out, (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, ad)),), "log_sigmoid")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """View of rows ``start:stop``; gradient lands in those rows only."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return make(a.data[start:stop], (a,), backward, "slice_rows")


def concat(tensors, axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy name
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return make(np.asarray(a.data.mean()), (a,),
                lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise EmptySupportError("logsumexp over entries that are all -inf")
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    return np.squeeze(m + np.log(s), axis=axis)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp; ``-inf`` entries contribute nothing."""
    out = _lse(a.data, axis)

    def backward(g):
        p = np.exp(a.data - np.expand_dims(out, axis))
        p *= np.expand_dims(g, axis)
        return (p,)

    return make(out, (a,), backward, "logsumexp")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no tape)."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(a: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``keep`` is False entries get weight 0."""
    x = np.where(keep, a.data, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise EmptySupportError("masked_softmax row with no kept entries")
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    out = e

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make(out, (a,), backward, "masked_softmax")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True; those entries pass no gradient."""
    mask = np.asarray(mask, dtype=bool)
    return make(np.where(mask, value, a.data).astype(a.dtype, copy=False), (a,),
                lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def top_k(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries in descending order.

    Ties go to the lower index. No gradient flows through the selection.
    """
    v = values.data if isinstance(values, Tensor) else np.asarray(values)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k needs 1 <= k <= {n}, got k={k}")
    if k == n or np.isnan(v).any():
        return np.argsort(-v, axis=-1, kind="stable")[..., :k]
    # partition to find the k-th largest value, keep everything above it plus
    # the lowest-indexed ties, then order the survivors
    rows = v.reshape(-1, n)
    kth = -np.partition(-rows, k - 1, axis=-1)[:, k - 1:k]
    above = rows > kth
    need = k - above.sum(axis=-1, keepdims=True)
    tie = rows == kth
    keep = above | (tie & (np.cumsum(tie, axis=-1) <= need))
    idx = np.nonzero(keep)[1].reshape(rows.shape[0], k)
    sel = np.take_along_axis(rows, idx, axis=-1)
    order = np.argsort(-sel, axis=-1, kind="stable")
    return np.take_along_axis(idx, order, axis=-1).reshape(v.shape[:-1] + (k,))


def scatter_add_rows(n: int, index, rows: np.ndarray) -> np.ndarray:
    """``out[index[i]] += rows[i]`` into a fresh ``n``-row array.

    Done as a sparse-dense product, which is much faster than ``np.add.at``.
    """
    index = np.asarray(index).reshape(-1)
    rows = rows.reshape(index.size, -1)
    m = index.size
    sel = sparse.csr_matrix((np.ones(m, dtype=rows.dtype), (index, np.arange(m))), shape=(n, m))
    return np.asarray(sel @ rows)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes of ``a`` (and ``b`` if present)."""
    a = _coerce(a)
    b = _coerce(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make(ad @ bd, (a, b), backward, "matmul")


def index_select(table: Tensor, index: np.ndarray, zero_rows=()) -> Tensor:
    """Gather rows of ``table``; output shape is ``index.shape + table.shape[1:]``.

    Rows listed in ``zero_rows`` never receive gradient (padding rows).
    """
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")

    def backward(g):
        full = scatter_add_rows(table.shape[0], index, g).reshape(table.shape)
        for r in zero_rows:
            full[r] = 0.0
        return (full,)

    return make(table.data[index], (table,), backward, "index_select")


def take_along(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[..., index[...]]`` along the last axis; index has shape ``a.shape[:-1]``."""
    index = np.asarray(index, dtype=np.int64)
    picked = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return make(picked, (a,), backward, "take_along")


# ---------------------------------------------------------------- network pieces

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = save(xc * inv)
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: RngState | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngState")
    keep = (rng.uniform32(x.shape) >= rate).astype(x.dtype)
    keep *= 1.0 / (1.0 - rate)
    return make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- fused losses

def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum over rows of ``logsumexp(row) - row[target]``.

    ``weights`` zero out padded rows; they are normally ``mask / mask.sum()``.
    Only the per-row log-normalizer is saved, so the backward pass allocates
    one logits-sized buffer for the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=logits.dtype)
    x = logits.data
    lse = save(_lse(x, -1))
    pos = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    value = np.asarray(np.sum(w * (lse - pos)), dtype=logits.dtype)

    def backward(g):
        p = np.exp(x - lse[..., None])
        p *= (g * w)[..., None]
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - (g * w)[..., None],
                          axis=-1)
        return (p,)

    return make(value, (logits,), backward, "cross_entropy")


def binary_cross_entropy(logits: Tensor, positive: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of ``-log s(l)`` where ``positive`` else ``-log(1 - s(l))``.

    ``weights`` broadcast against ``logits``.
    """
    positive = np.asarray(positive, dtype=bool)
    w = np.broadcast_to(np.asarray(weights, dtype=logits.dtype), logits.shape)
    x = logits.data
    signed = np.where(positive, x, -x)
    value = np.asarray(np.sum(w * np.logaddexp(0.0, -signed)), dtype=logits.dtype)

    def backward(g):
        # d/dx softplus(-x) = -sigmoid(-x); d/dx softplus(x) = sigmoid(x)
        s = np.exp(-np.logaddexp(0.0, -x))
        s -= positive
        s *= g * w
        return (s,)

    return make(value, (logits,), backward, "binary_cross_entropy")
