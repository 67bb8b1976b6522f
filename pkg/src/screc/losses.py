"""Baseline next-item losses: full CE, BCE, BCE with k negatives, sampled CE.

Every loss takes model outputs ``X`` (``N x d``, one row per position),
the classification matrix ``Y`` (``C x d``), 1-based ``targets`` (length
``N``) and a boolean ``mask`` that is True at real (non-padded) positions.
Values are averaged over real positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import RngState, Tensor


class EmptyBatchError(ValueError):
    """Every position in the batch is padding."""


@dataclass
class LossOutput:
    value: Tensor
    positions_counted: int

    def item(self) -> float:
        return self.value.item()


def _prepare(X: Tensor, Y: Tensor, targets, mask):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if X.shape[0] != targets.shape[0] or mask.shape[0] != targets.shape[0]:
        raise nx.DimensionError(f"X has {X.shape[0]} rows, targets {targets.shape[0]}, mask {mask.shape[0]}")
    if X.shape[1] != Y.shape[1]:
        raise nx.DimensionError(f"X dim {X.shape[1]} != Y dim {Y.shape[1]}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyBatchError("no non-padded positions")
    C = Y.shape[0]
    t = targets[mask]
    if t.min() < 1 or t.max() > C:
        raise ValueError(f"targets must lie in [1, {C}]")
    return targets, mask, n


def full_ce(X: Tensor, Y: Tensor, targets, mask) -> LossOutput:
    """Softmax cross-entropy over the whole catalog."""
    targets, mask, n = _prepare(X, Y, targets, mask)
    logits = nx.matmul(X, nx.transpose(Y))
    cols = np.where(mask, targets - 1, 0)
    return LossOutput(nx.cross_entropy(logits, cols, mask / n), n)


def per_position_ce(X, Y, targets) -> np.ndarray:
    """Full-CE loss of every row, no gradient tracking."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X)
    y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    logits = x @ y.T
    lse = nx.ops._lse(logits, -1)
    return lse - logits[np.arange(len(targets)), np.clip(targets - 1, 0, None)]


# ---------------------------------------------------------------- negatives

def sample_negatives(targets, k: int, n_items: int, rng: RngState, replace: bool = True) -> np.ndarray:
    """Per-position uniform negatives from ``{1..C} \\ {target}``.

    Returns an ``N x k`` integer matrix. With ``replace=False`` the ``k``
    negatives of a row are distinct. Targets of 0 (padding) are treated as
    having no positive to exclude beyond index 0 itself.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n_items - 1:
        raise ValueError(f"cannot draw k={k} negatives from a catalog of {n_items} items")
    N = targets.shape[0]
    safe_t = np.where(targets >= 1, targets, 1)
    if replace:
        # uniform over C-1 slots, shifted past the target
        r = rng.integers(1, n_items, (N, k))
        return r + (r >= safe_t[:, None])
    keys = rng.uniform((N, n_items))
    keys[np.arange(N), safe_t - 1] = np.inf
    r = np.argsort(keys, axis=1, kind="stable")[:, :k] + 1
    return r


def _check_negatives(negatives, targets, mask, n_items):
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 2 or negatives.shape[0] != targets.shape[0]:
        raise nx.DimensionError(f"negatives must be (N, k) with N={targets.shape[0]}")
    real = negatives[mask]
    if real.size and (real.min() < 1 or real.max() > n_items):
        raise ValueError(f"negatives must lie in [1, {n_items}]")
    if np.any(real == targets[mask][:, None]):
        raise ValueError("a negative coincides with its own positive")
    return negatives


def sampled_logits(X: Tensor, Y: Tensor, targets, negatives) -> Tensor:
    """``N x (k+1)`` logits: column 0 is the positive, the rest are negatives.

    Gathered embeddings are kernel temporaries; only the logits are kept.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    negatives = np.asarray(negatives, dtype=np.int64)
    cols = np.concatenate([np.maximum(targets, 1)[:, None], negatives], axis=1) - 1
    xd, yd = X.data, Y.data
    out = np.einsum("nd,nkd->nk", xd, yd[cols])

    def backward(g):
        gx = gy = None
        if X.requires_grad:
            gx = np.einsum("nk,nkd->nd", g, yd[cols])
        if Y.requires_grad:
            gy = nx.scatter_add_rows(yd.shape[0], cols, g[:, :, None] * xd[:, None, :])
        return gx, gy

    return nx.tensor.make(out, (X, Y), backward, "sampled_logits")


def bce(X: Tensor, Y: Tensor, targets, negatives, mask) -> LossOutput:
    """Binary cross-entropy with one negative per position."""
    negatives = np.asarray(negatives)
    if negatives.ndim != 2 or negatives.shape[1] != 1:
        raise ValueError("bce takes exactly one negative per position")
    return bce_plus(X, Y, targets, negatives, mask)


def bce_plus(X: Tensor, Y: Tensor, targets, negatives, mask) -> LossOutput:
    """``-log s(l+) - sum_j log(1 - s(l_j))`` over ``k`` negatives, averaged."""
    targets, mask, n = _prepare(X, Y, targets, mask)
    negatives = _check_negatives(negatives, targets, mask, Y.shape[0])
    logits = sampled_logits(X, Y, targets, negatives)
    positive = np.zeros(logits.shape, dtype=bool)
    positive[:, 0] = True
    w = (mask / n)[:, None]
    return LossOutput(nx.binary_cross_entropy(logits, positive, w), n)


def ce_minus(X: Tensor, Y: Tensor, targets, negatives, mask) -> LossOutput:
    """Cross-entropy over the positive and ``k`` sampled negatives."""
    targets, mask, n = _prepare(X, Y, targets, mask)
    negatives = _check_negatives(negatives, targets, mask, Y.shape[0])
    logits = sampled_logits(X, Y, targets, negatives)
    return LossOutput(nx.cross_entropy(logits, np.zeros(len(targets), dtype=np.int64), mask / n), n)
