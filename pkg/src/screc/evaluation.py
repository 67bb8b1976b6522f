"""Unsampled top-K ranking metrics over the full catalog."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import pad_history
from .numerics import no_grad

KS = (1, 5, 10)


def rank_items(x_last, Y, exclusions=()) -> np.ndarray:
    """1-based item indices by descending score ``Y @ x_last``.

    Excluded items are removed; ties go to the lower index.
    """
    scores = np.asarray(Y, dtype=np.float64) @ np.asarray(x_last, dtype=np.float64)
    order = np.argsort(-scores, kind="stable") + 1
    if len(exclusions):
        if len(set(exclusions)) >= len(scores):
            raise ValueError("exclusions cover the whole catalog")
        order = order[~np.isin(order, np.asarray(list(exclusions)))]
    return order


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: ``1 / log2(1 + rank)`` within the cutoff."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / np.log2(1.0 + rank) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank <= k else 0.0


def cov_at_k(top_lists, n_items: int) -> float:
    """Share of the catalog that appears in at least one recommendation list."""
    seen: set[int] = set()
    for lst in top_lists:
        seen.update(int(i) for i in lst)
    return len(seen) / n_items


@dataclass
class MetricsReport:
    ndcg: dict[int, float] = field(default_factory=dict)
    hr: dict[int, float] = field(default_factory=dict)
    cov: dict[int, float] = field(default_factory=dict)
    n_users: int = 0

    def to_dict(self) -> dict:
        out = {"n_users": self.n_users}
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
            out[f"hr@{k}"] = self.hr[k]
            out[f"cov@{k}"] = self.cov[k]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        ks = sorted({int(key.split("@")[1]) for key in d if "@" in key})
        return cls({k: d[f"ndcg@{k}"] for k in ks}, {k: d[f"hr@{k}"] for k in ks},
                   {k: d[f"cov@{k}"] for k in ks}, int(d.get("n_users", 0)))

    def pretty(self) -> str:
        lines = [f"users evaluated: {self.n_users}", f"{'K':>4} {'NDCG':>8} {'HR':>8} {'COV':>8}"]
        for k in sorted(self.ndcg):
            lines.append(f"{k:>4} {self.ndcg[k]:8.4f} {self.hr[k]:8.4f} {self.cov[k]:8.4f}")
        return "\n".join(lines)


def metrics_from_scores(scores: np.ndarray, targets, exclusions=None, ks=KS) -> MetricsReport:
    """Metrics from a ``users x C`` score matrix (column ``c`` is item ``c + 1``).

    ``exclusions`` is an optional list of per-user item collections removed
    before ranking. A target that is itself excluded can never be hit.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    targets = np.asarray(targets, dtype=np.int64)
    U, C = scores.shape
    excluded = np.zeros((U, C), dtype=bool)
    if exclusions is not None:
        for u, items in enumerate(exclusions):
            idx = np.asarray(list(items), dtype=np.int64)
            if idx.size:
                excluded[u, idx - 1] = True
        scores[excluded] = -np.inf
    rows = np.arange(U)
    tscore = scores[rows, targets - 1]
    # rank = 1 + strictly better items + equal-scored items with lower index
    better = (scores > tscore[:, None]).sum(axis=1)
    col = np.arange(C)[None, :]
    tied_before = ((scores == tscore[:, None]) & (col < (targets - 1)[:, None])).sum(axis=1)
    ranks = 1 + better + tied_before
    ranks = np.where(np.isneginf(tscore), C + 1, ranks)
    kmax = max(ks)
    top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
    # excluded items sort last and are never recommended, even if a list runs short
    top_ok = ~np.take_along_axis(excluded, top, axis=1)
    rep = MetricsReport(n_users=U)
    for k in ks:
        rep.ndcg[k] = float(np.mean([ndcg_at_k(r, k) for r in ranks])) if U else 0.0
        rep.hr[k] = float(np.mean(ranks <= k)) if U else 0.0
        rep.cov[k] = cov_at_k([row[ok] + 1 for row, ok in zip(top[:, :k], top_ok[:, :k])], C)
    return rep


def evaluate_model(model, holdout: dict, exclude_history: bool = True, ks=KS, batch_size: int = 256) -> MetricsReport:
    """Score every held-out user at the final position of their history."""
    users = sorted(u for u, (h, _) in holdout.items() if len(h))
    if not users:
        return MetricsReport({k: 0.0 for k in ks}, {k: 0.0 for k in ks}, {k: 0.0 for k in ks}, 0)
    l = model.config.max_len
    with no_grad():
        Y = model.tied_catalog().data
        parts = []
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            inputs = np.stack([pad_history(holdout[u][0], l) for u in chunk])
            X = model.forward(inputs, training=False).data.reshape(len(chunk), l, -1)
            parts.append(X[:, -1, :] @ Y.T)
    scores = np.concatenate(parts)
    targets = [holdout[u][1] for u in users]
    excl = [set(holdout[u][0].tolist()) for u in users] if exclude_history else None
    return metrics_from_scores(scores, targets, excl, ks)
