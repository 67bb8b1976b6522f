"""Analytic logit-memory estimates and counting-allocator measurements."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import numerics as nx
from ..losses import bce_plus, ce_minus, full_ce, sample_negatives
from ..numerics import RngState, Tensor
from ..sce import SceConfig, sce_loss

BYTES_PER_ELEMENT = 4
LOSSES = ("ce", "bce", "bce_plus", "ce_minus", "sce")


@dataclass
class MemoryEstimate:
    loss: str
    logits_elements: int
    auxiliary_elements: int
    logits_bytes: int
    total_peak_bytes: int | None = None  # measured, when instrumentation ran

    @property
    def analytic_elements(self) -> int:
        return self.logits_elements + self.auxiliary_elements

    @property
    def analytic_bytes(self) -> int:
        return BYTES_PER_ELEMENT * self.analytic_elements

    def to_dict(self) -> dict:
        out = asdict(self)
        out["analytic_bytes"] = self.analytic_bytes
        return out


def estimate_memory(loss: str, s: int, l: int, C: int, d: int = 64, k: int = 1,
                    n_b: int | None = None, b_x: int | None = None, b_y: int | None = None) -> MemoryEstimate:
    """Element counts of the loss-side tensors at 4 bytes per element.

    * ``ce``: ``s*l*C`` logits, plus one log-normalizer per position.
    * ``bce`` (``k=1``), ``bce_plus``, ``ce_minus``: ``s*l*(k+1)`` logits,
      plus one reduction value per position.
    * ``sce``: ``n_b*b_x*b_y`` bucket logits, plus ``n_b*b_x`` positives and
      log-normalizers, plus the ``n_b*(s*l + C)`` projection scores.

    ``d`` does not enter any count; it is accepted so callers can pass a
    whole configuration.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    if min(s, l, C) < 1:
        raise ValueError("s, l and C must be positive")
    n = s * l
    if loss == "ce":
        logits, aux = n * C, n
    elif loss in ("bce", "bce_plus", "ce_minus"):
        if loss == "bce":
            k = 1
        if k < 1:
            raise ValueError("k must be >= 1")
        logits, aux = n * (k + 1), n
    else:
        if None in (n_b, b_x, b_y):
            raise ValueError("sce needs n_b, b_x and b_y")
        logits = n_b * b_x * b_y
        aux = n_b * b_x + n_b * (n + C)
    return MemoryEstimate(loss, int(logits), int(aux), BYTES_PER_ELEMENT * int(logits))


def format_bytes(n: float) -> str:
    """Decimal units, as in ``102.4 GB``."""
    for unit in ("B", "kB", "MB", "GB", "TB"):
        if abs(n) < 1000 or unit == "TB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{int(n)} B"
        n /= 1000.0
    return f"{n:.1f} TB"


def measure_loss_memory(loss: str, s: int, l: int, C: int, d: int = 64, k: int = 1,
                        n_b: int | None = None, b_x: int | None = None, b_y: int | None = None,
                        use_mix: bool = True, seed: int = 0) -> MemoryEstimate:
    """Run one forward+backward of ``loss`` in float32 under the counting allocator.

    ``X`` (``s*l x d``) and ``Y`` (``C x d``) are random leaves whose gradient
    buffers are allocated before counting starts, so the measured peak
    covers only transient buffers created by the loss.
    """
    est = estimate_memory(loss, s, l, C, d, k, n_b, b_x, b_y)
    rng = RngState(seed)
    N = s * l
    X = Tensor(rng.normal((N, d)).astype(np.float32) * 0.3, requires_grad=True)
    Y = Tensor(rng.normal((C, d)).astype(np.float32) * 0.3, requires_grad=True)
    X.grad = np.zeros_like(X.data)
    Y.grad = np.zeros_like(Y.data)
    targets = rng.integers(1, C + 1, (N,))
    mask = np.ones(N, dtype=bool)
    negatives = None
    if loss in ("bce", "bce_plus", "ce_minus"):
        negatives = sample_negatives(targets, 1 if loss == "bce" else k, C, rng)
    with nx.track_memory() as mem:
        if loss == "ce":
            out = full_ce(X, Y, targets, mask).value
        elif loss in ("bce", "bce_plus"):
            out = bce_plus(X, Y, targets, negatives, mask).value
        elif loss == "ce_minus":
            out = ce_minus(X, Y, targets, negatives, mask).value
        else:
            cfg = SceConfig(n_b=n_b, b_x=b_x, b_y=b_y, use_mix=use_mix)
            out = sce_loss(X, Y, targets, cfg, mask, rng).value
        nx.backward(out)
        del out
    est.total_peak_bytes = int(mem.peak)
    return est
