"""Scalable cross-entropy: bucketed softmax over hard negatives.

Each step draws ``n_b`` bucket centres. Every centre collects the ``b_x``
model outputs and the ``b_y`` catalog items with the largest dot products
against it, and a softmax cross-entropy is computed only over the
``b_x x b_y`` logits inside the bucket (plus each row's positive). An output
placed in several buckets keeps its largest loss.

Centres are either i.i.d. standard normal vectors or, with Mix, random
Gaussian combinations of the batch's model outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .losses import EmptyBatchError, _prepare
from .numerics import RngState, Tensor


class DegenerateAssignmentError(ValueError):
    """Bucket sizes are incompatible with the batch (strict mode)."""


@dataclass
class SceConfig:
    n_b: int
    b_x: int
    b_y: int
    use_mix: bool = True
    mix_target: str = "x"  # "x" mixes model outputs, "y" mixes catalog rows
    alpha: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if self.n_b < 1 or self.b_x < 1 or self.b_y < 1:
            raise ValueError("n_b, b_x and b_y must all be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mix_target not in ("x", "y"):
            raise ValueError("mix_target must be 'x' or 'y'")

    @classmethod
    def from_alpha_beta(cls, s: int, l: int, l_bar: float, b_y: int, alpha: float = 2.0,
                        beta: float = 1.0, use_mix: bool = True) -> "SceConfig":
        n_b, b_x = derive_bucket_params(s, l, l_bar, alpha, beta)
        return cls(n_b=n_b, b_x=b_x, b_y=b_y, use_mix=use_mix, alpha=alpha, beta=beta)


@dataclass
class BucketAssignment:
    I: np.ndarray  # (n_b, b_x) row indices into the flattened outputs
    J: np.ndarray  # (n_b, b_y) 0-based catalog rows

    @property
    def n_b(self) -> int:
        return self.I.shape[0]


@dataclass
class SceOutput:
    value: Tensor
    unique_selection_fraction: float
    correct_logit_fraction: float
    covered_positions: int
    assignment: BucketAssignment = field(repr=False)
    position_loss: np.ndarray = field(default=None, repr=False)  # NaN where uncovered

    def item(self) -> float:
        return self.value.item()


def derive_bucket_params(s: int, l: int, l_bar: float, alpha: float = 2.0, beta: float = 1.0) -> tuple[int, int]:
    """Return ``(n_b, b_x)`` from batch shape and oversampling settings.

    ``b_x = alpha * sqrt(s * l_bar * beta)`` and ``n_b = alpha * sqrt(s * l / beta)``,
    rounded and clamped to ``[1, s * l]``. ``l_bar`` is the mean number of
    interactions per user.
    """
    if min(s, l, l_bar, alpha, beta) <= 0:
        raise ValueError("all inputs must be positive")
    cap = s * l
    b_x = int(round(alpha * math.sqrt(s * l_bar * beta)))
    n_b = int(round(alpha * math.sqrt(s * l / beta)))
    return min(max(n_b, 1), cap), min(max(b_x, 1), cap)


# ---------------------------------------------------------------- bucket centres

def generate_bucket_centers(n_b: int, d: int, rng: RngState) -> np.ndarray:
    """``n_b x d`` i.i.d. standard normal centres (never tracked)."""
    if n_b < 1:
        raise ValueError("n_b must be >= 1")
    return rng.normal((n_b, d))


def mix_bucket_centers(X, n_b: int, rng: RngState, mask=None) -> np.ndarray:
    """Centres ``B = Omega @ X`` with Gaussian ``Omega`` (``n_b x rows``).

    Columns of ``Omega`` at masked-out rows are zero, so every centre lies in
    the span of the real rows of ``X``. A fresh ``Omega`` is drawn per call.
    """
    x = X.data if isinstance(X, Tensor) else np.asarray(X)
    N = x.shape[0]
    mask = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise EmptyBatchError("mix needs at least one non-padded row")
    # zero columns at padded rows contribute nothing, so only real rows are drawn
    omega = rng.normal((n_b, int(mask.sum())))
    with nx.no_grad():
        return nx.matmul(Tensor(omega.astype(x.dtype, copy=False)), Tensor(x[mask])).data


# ---------------------------------------------------------------- assignment

def assign_buckets(B, X, Y, b_x: int, b_y: int, mask=None, strict: bool = True) -> BucketAssignment:
    """Top-``b_x`` outputs and top-``b_y`` items by dot product with each centre.

    Masked rows of ``X`` are filled with ``-inf`` before selection and can
    never be chosen. With ``strict=False`` oversized buckets are clamped.
    """
    x = X.data if isinstance(X, Tensor) else np.asarray(X)
    y = Y.data if isinstance(Y, Tensor) else np.asarray(Y)
    B = B.data if isinstance(B, Tensor) else np.asarray(B)
    N, C = x.shape[0], y.shape[0]
    mask = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n_real = int(mask.sum())
    if n_real == 0:
        raise EmptyBatchError("no non-padded positions to place in buckets")
    if b_x > n_real or b_y > C:
        if strict:
            raise DegenerateAssignmentError(
                f"b_x={b_x} (real positions {n_real}) or b_y={b_y} (catalog {C}) too large")
        b_x, b_y = min(b_x, n_real), min(b_y, C)
    with nx.no_grad():
        Bt = Tensor(B.astype(x.dtype, copy=False))
        xp = nx.matmul(Bt, Tensor(x.T)).data
        xp[:, ~mask] = -np.inf
        I = nx.top_k(xp, b_x)
        del xp
        yp = nx.matmul(Bt, Tensor(y.T)).data
        J = nx.top_k(yp, b_y)
        del yp
    return BucketAssignment(I=np.ascontiguousarray(I), J=np.ascontiguousarray(J))


# ---------------------------------------------------------------- loss kernels

def bucket_cross_entropy(X: Tensor, Y: Tensor, assignment: BucketAssignment, targets) -> Tensor:
    """Per-placement loss ``(n_b, b_x)`` inside each bucket.

    For row ``i`` of bucket ``b`` the softmax runs over the row's positive
    logit and the ``b_y`` bucket logits, where any bucket item equal to the
    row's own target is masked to ``-inf`` (it re-enters only as the
    positive). Only the ``n_b x b_x x b_y`` logit block and two ``n_b x b_x``
    vectors are held for the backward pass.
    """
    I, J = assignment.I, assignment.J
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    xd, yd = X.data, Y.data
    t_rows = targets[I] - 1  # (n_b, b_x) 0-based catalog row of each positive
    xi = xd[I]
    yj = yd[J]
    block = nx.tensor.save(np.matmul(xi, np.swapaxes(yj, 1, 2)))
    block[J[:, None, :] == t_rows[:, :, None]] = -np.inf
    pos = nx.tensor.save(np.einsum("bid,bid->bi", xi, yd[t_rows]))
    del xi, yj
    m = np.maximum(pos, block.max(axis=2))
    z = np.exp(pos - m) + np.exp(block - m[..., None]).sum(axis=2)
    lse = nx.tensor.save(m + np.log(z))
    out = lse - pos
    d = xd.shape[1]

    def backward(g):
        p = nx.tensor.save(np.exp(block - lse[..., None]))
        p *= g[..., None]
        dpos = (np.exp(pos - lse) - 1.0) * g
        gx = gy = None
        if X.requires_grad:
            rows = np.matmul(p, yd[J]) + dpos[..., None] * yd[t_rows]
            gx = nx.scatter_add_rows(xd.shape[0], I, rows)
        if Y.requires_grad:
            xi_b = xd[I]
            gy = nx.scatter_add_rows(yd.shape[0], np.concatenate([J.reshape(-1), t_rows.reshape(-1)]),
                                     np.concatenate([np.matmul(np.swapaxes(p, 1, 2), xi_b).reshape(-1, d),
                                                     (dpos[..., None] * xi_b).reshape(-1, d)]))
        return gx, gy

    return nx.tensor.make(out, (X, Y), backward, "bucket_cross_entropy")


def max_over_placements(losses: Tensor, I: np.ndarray) -> Tensor:
    """Mean over covered outputs of their largest per-placement loss."""
    flat = losses.data.reshape(-1)
    idx = np.asarray(I).reshape(-1)
    n = flat.shape[0]
    # group by output, largest loss first, earliest placement on ties
    order = np.lexsort((np.arange(n), -flat, idx))
    first = np.ones(n, dtype=bool)
    first[1:] = idx[order][1:] != idx[order][:-1]
    winners = order[first]
    n_cov = winners.shape[0]
    value = np.asarray(flat[winners].sum() / n_cov, dtype=losses.dtype)
    shape = losses.shape

    def backward(g):
        full = np.zeros(n, dtype=losses.dtype)
        full[winners] = g / n_cov
        return (full.reshape(shape),)

    return nx.tensor.make(value, (losses,), backward, "max_over_placements")


def selection_diagnostics(I: np.ndarray, J: np.ndarray, targets, n_real: int) -> tuple[float, float, int]:
    """``(unique_selection_fraction, correct_logit_fraction, covered_positions)``.

    The first is the share of real positions placed in exactly one bucket;
    the second is the share of the ``n_b * b_x`` placements whose own target
    appears among the bucket's catalog items.
    """
    idx, counts = np.unique(I, return_counts=True)
    unique = float((counts == 1).sum()) / n_real
    t_rows = np.asarray(targets, dtype=np.int64).reshape(-1)[I] - 1
    hits = (J[:, None, :] == t_rows[:, :, None]).any(axis=2)
    correct = float(hits.sum()) / I.size
    return unique, correct, int(idx.shape[0])


def sce_loss(X: Tensor, Y: Tensor, targets, config: SceConfig, mask=None, rng: RngState | None = None,
             centers=None, assignment: BucketAssignment | None = None, strict: bool = True) -> SceOutput:
    """Scalable cross-entropy over the real positions of a batch.

    ``targets`` are 1-based catalog indices aligned with the rows of ``X``.
    Bucket centres come from ``centers`` when given, otherwise from ``rng``
    (plain Gaussian or Mix per ``config``); a precomputed ``assignment``
    skips selection entirely.
    """
    N = X.shape[0]
    mask = np.ones(N, dtype=bool) if mask is None else mask
    targets, mask, n_real = _prepare(X, Y, targets, mask)
    if assignment is None:
        if centers is None:
            if rng is None:
                raise ValueError("sce_loss needs an RngState to draw bucket centres")
            if config.use_mix and config.mix_target == "x":
                centers = mix_bucket_centers(X, config.n_b, rng, mask)
            elif config.use_mix:
                centers = mix_bucket_centers(Y, config.n_b, rng)
            else:
                centers = generate_bucket_centers(config.n_b, X.shape[1], rng)
        assignment = assign_buckets(centers, X, Y, config.b_x, config.b_y, mask, strict=strict)
    losses = bucket_cross_entropy(X, Y, assignment, targets)
    value = max_over_placements(losses, assignment.I)
    unique, correct, covered = selection_diagnostics(assignment.I, assignment.J, targets, n_real)
    per_pos = np.full(N, np.nan)
    best = np.full(N, -np.inf)
    np.maximum.at(best, assignment.I.reshape(-1), losses.data.reshape(-1))
    covered_rows = np.isfinite(best)
    per_pos[covered_rows] = best[covered_rows]
    return SceOutput(value, unique, correct, covered, assignment, per_pos)
