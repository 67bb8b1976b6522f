"""Grid sweeps over training configs with a resumable cache and Pareto-front extraction."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..data import SequenceDataset
from .train import TrainConfig, train

log = logging.getLogger(__name__)

CSV_FIELDS = ["config_id", "loss", "s", "l", "params", "status", "peak_bytes", "analytic_bytes", "seconds",
              "best_epoch", "ndcg@1", "ndcg@5", "ndcg@10", "hr@5", "hr@10", "cov@1", "cov@5", "cov@10"]


@dataclass
class ParetoPoint:
    config_id: str
    peak_bytes: int
    seconds: float
    ndcg10: float
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config_id": self.config_id, "peak_bytes": self.peak_bytes, "seconds": self.seconds,
                "ndcg@10": self.ndcg10, "metrics": self.metrics}


def expand_grid(grid: dict) -> list[TrainConfig]:
    """Expand a grid document into configs.

    Schema::

        {"version": 1,
         "base": {...TrainConfig fields...},
         "groups": [{"fixed": {...}, "axes": {"field": [v1, v2], ...}}, ...]}

    Each group is the cartesian product of its axes on top of ``base`` and
    ``fixed``. Duplicate configs are dropped, keeping the first.
    """
    if grid.get("version", 1) != 1:
        raise ValueError(f"unsupported grid version {grid.get('version')}")
    base = dict(grid.get("base", {}))
    groups = grid.get("groups") or [{"axes": grid.get("axes", {})}]
    out, seen = [], set()
    for g in groups:
        axes = g.get("axes", {})
        names = sorted(axes)
        for values in itertools.product(*(axes[n] for n in names)):
            d = {**base, **g.get("fixed", {}), **dict(zip(names, values))}
            cfg = TrainConfig.from_dict(d)
            cid = cfg.config_id()
            if cid not in seen:
                seen.add(cid)
                out.append(cfg)
    return out


# ---------------------------------------------------------------- Pareto front

def _dominates(q: dict, p: dict) -> bool:
    return (q["peak_bytes"] <= p["peak_bytes"] and q["ndcg@10"] >= p["ndcg@10"]
            and (q["peak_bytes"] < p["peak_bytes"] or q["ndcg@10"] > p["ndcg@10"]))


def _eligible(rows):
    return [(i, r) for i, r in enumerate(rows)
            if r.get("status", "ok") == "ok" and r.get("peak_bytes") is not None
            and r.get("ndcg@10") is not None and not math.isnan(float(r["ndcg@10"]))]


def pareto_front_bruteforce(rows: list[dict]) -> list[int]:
    """O(n^2) reference: indices of points no other point dominates.

    Exact duplicates (same memory and NDCG) keep only the earliest row.
    """
    ok = _eligible(rows)
    keep = []
    for i, p in ok:
        beaten = False
        for j, q in ok:
            if j == i:
                continue
            same = q["peak_bytes"] == p["peak_bytes"] and q["ndcg@10"] == p["ndcg@10"]
            if _dominates(q, p) or (same and j < i):
                beaten = True
                break
        if not beaten:
            keep.append(i)
    return keep


def pareto_front(rows: list[dict]) -> list[int]:
    """Indices of the non-dominated rows in the (memory down, NDCG@10 up) plane, ordered by memory."""
    ok = _eligible(rows)
    ok.sort(key=lambda t: (t[1]["peak_bytes"], -t[1]["ndcg@10"], t[0]))
    keep, best = [], -math.inf
    for i, r in ok:
        if r["ndcg@10"] > best:
            keep.append(i)
            best = r["ndcg@10"]
    return keep


# ---------------------------------------------------------------- cache

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _params(cfg: TrainConfig) -> str:
    if cfg.loss == "sce":
        keys = ("n_b", "b_x", "b_y", "alpha", "beta", "use_mix")
    elif cfg.loss == "ce":
        keys = ()
    else:
        keys = ("k",)
    return ";".join(f"{k}={getattr(cfg, k)}" for k in keys)


def run_one(cfg: TrainConfig, dataset: SequenceDataset, cache_dir=None, run_dir=None) -> dict:
    """Train one config and return its results row; failures become rows with ``status='failed'``."""
    cid = cfg.config_id()
    if cache_dir is not None:
        hit = Path(cache_dir) / f"{cid}.json"
        if hit.exists():
            return json.loads(hit.read_text())
    est = cfg.memory_estimate(dataset.n_items, dataset.mean_train_length())
    row = {"config_id": cid, "loss": cfg.loss, "s": cfg.batch_size, "l": cfg.max_len, "params": _params(cfg),
           "analytic_bytes": est.analytic_bytes, "config": cfg.to_dict()}
    try:
        res = train(cfg, dataset, out_dir=None if run_dir is None else Path(run_dir) / cid)
        m = res.test.to_dict()
        row.update(status="ok", peak_bytes=res.peak_bytes, seconds=res.seconds, best_epoch=res.best_epoch,
                   metrics=m, **{k: m[k] for k in CSV_FIELDS if k in m})
    except Exception as exc:  # recorded, the sweep keeps going
        log.warning("config %s failed: %s", cid, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc(),
                   peak_bytes=None, seconds=None)
    if cache_dir is not None:
        _atomic_write(Path(cache_dir) / f"{cid}.json", json.dumps(row, indent=2, default=float))
    return row


def pareto_sweep(configs: list[TrainConfig], dataset: SequenceDataset, out_dir, workers: int = 1):
    """Run every config (cached by config hash), write ``results.csv``/``results.json``/``front.json``.

    Returns ``(front, rows)``.
    """
    if not configs:
        raise ValueError("sweep needs at least one config")
    out = Path(out_dir)
    cache = out / "cache"
    runs = out / "runs"
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, configs, [dataset] * len(configs), [cache] * len(configs),
                                 [runs] * len(configs)))
    else:
        rows = [run_one(c, dataset, cache, runs) for c in configs]
    idx = pareto_front(rows)
    front = [ParetoPoint(rows[i]["config_id"], rows[i]["peak_bytes"], rows[i]["seconds"], rows[i]["ndcg@10"],
                         rows[i].get("metrics", {})) for i in idx]
    write_results(out, rows, front)
    return front, rows


def write_results(out: Path, rows: list[dict], front: list[ParetoPoint]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    on_front = {p.config_id for p in front}
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS + ["on_front"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**{k: r.get(k, "") for k in CSV_FIELDS}, "on_front": r["config_id"] in on_front})
    slim = [{k: v for k, v in r.items() if k != "traceback"} for r in rows]
    _atomic_write(out / "results.json", json.dumps(slim, indent=2, default=float))
    _atomic_write(out / "front.json", json.dumps([p.to_dict() for p in front], indent=2, default=float))


def read_results_csv(path) -> list[dict]:
    """Load ``results.csv`` back into rows with numeric memory and NDCG columns."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            r["peak_bytes"] = int(r["peak_bytes"]) if r["peak_bytes"] else None
            r["ndcg@10"] = float(r["ndcg@10"]) if r["ndcg@10"] else None
            rows.append(r)
    return rows
