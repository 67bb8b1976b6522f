"""Interaction logs, filtering, temporal splitting and batching.

Items are remapped to dense indices ``1..C`` (0 is padding). The default
split takes the timestamp at the 0.95 quantile of all interactions; users
with any interaction at or after it become test users and leave the
training set entirely. Each test user's last item is the test target and the
second-to-last the validation target.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import RngState

log = logging.getLogger(__name__)

DATASET_FORMAT = "screc-dataset"
DATASET_VERSION = 1


class IngestionError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Parallel arrays of (user, item, timestamp) in file order."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    malformed: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users).astype(str)
        self.items = np.asarray(self.items).astype(str)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise ValueError("users, items and timestamps must have equal length")
        if len(self.timestamps) and self.timestamps.min() < 0:
            raise ValueError("timestamps must be non-negative")

    def __len__(self) -> int:
        return len(self.timestamps)

    def subset(self, keep: np.ndarray) -> "InteractionLog":
        return InteractionLog(self.users[keep], self.items[keep], self.timestamps[keep], self.malformed)

    def n_users(self) -> int:
        return len(np.unique(self.users))

    def n_items(self) -> int:
        return len(np.unique(self.items))


def load_interactions(path, fmt: str | None = None, columns=("user", "item", "timestamp"),
                      header: bool | None = None, dedup: bool = False,
                      max_malformed: float = 0.01) -> InteractionLog:
    """Read a CSV/TSV interaction log.

    ``columns`` names the file's columns in order; ``user``, ``item`` and
    ``timestamp`` must be among them. ``header=None`` detects a header row by
    the timestamp column failing to parse on the first line. Malformed lines
    are skipped and counted; more than ``max_malformed`` of them (a fraction
    of data lines) raises :class:`IngestionError`.
    """
    path = Path(path)
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".tab") else "csv"
    if fmt not in ("csv", "tsv"):
        raise ValueError(f"unsupported format {fmt!r}")
    columns = list(columns)
    try:
        pos = {name: columns.index(name) for name in ("user", "item", "timestamp")}
    except ValueError as exc:
        raise ValueError(f"columns must include user, item and timestamp: {columns}") from exc
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc

    users, items, stamps = [], [], []
    bad = total = 0
    with fh:
        reader = csv.reader(fh, delimiter="\t" if fmt == "tsv" else ",")
        for lineno, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 0 and header is not False:
                if header or not _parses_int(row, pos["timestamp"]):
                    continue
            total += 1
            try:
                u = row[pos["user"]].strip()
                it = row[pos["item"]].strip()
                ts = _parse_ts(row[pos["timestamp"]])
                if not u or not it or ts < 0:
                    raise ValueError
            except (IndexError, ValueError):
                bad += 1
                continue
            users.append(u)
            items.append(it)
            stamps.append(ts)
    if total and bad / total > max_malformed:
        raise IngestionError(f"{path}: {bad} of {total} lines malformed (limit {max_malformed:.1%})")
    if bad:
        log.warning("%s: skipped %d malformed lines", path, bad)
    out = InteractionLog(np.array(users, dtype=str), np.array(items, dtype=str),
                         np.array(stamps, dtype=np.int64), malformed=bad)
    if dedup:
        out = deduplicate(out)
    return out


def _parses_int(row, i) -> bool:
    try:
        _parse_ts(row[i])
        return True
    except (IndexError, ValueError):
        return False


def _parse_ts(s: str) -> int:
    s = s.strip()
    try:
        return int(s)
    except ValueError:
        v = float(s)
        if not math.isfinite(v):
            raise
        return int(v)


def deduplicate(log_: InteractionLog) -> InteractionLog:
    """Drop exact repeats of (user, item, timestamp), keeping the first."""
    seen = set()
    keep = np.zeros(len(log_), dtype=bool)
    for i, key in enumerate(zip(log_.users.tolist(), log_.items.tolist(), log_.timestamps.tolist())):
        if key not in seen:
            seen.add(key)
            keep[i] = True
    return log_.subset(keep)


def p_core_filter(log_: InteractionLog, min_item_interactions: int = 5,
                  min_user_interactions: int = 20, iterate: bool = False) -> InteractionLog:
    """Drop rare items, then users with short histories.

    One pass of each by default. ``iterate=True`` repeats until both
    thresholds hold at once.
    """
    while True:
        n_before = len(log_)
        _, inv, counts = np.unique(log_.items, return_inverse=True, return_counts=True)
        log_ = log_.subset(counts[inv] >= min_item_interactions)
        _, inv, counts = np.unique(log_.users, return_inverse=True, return_counts=True)
        log_ = log_.subset(counts[inv] >= min_user_interactions)
        if not iterate or len(log_) == n_before:
            return log_


# ---------------------------------------------------------------- splitting

@dataclass
class SequenceDataset:
    n_items: int
    item_ids: list[str]  # item_ids[i - 1] is the raw id of index i
    train: dict[str, np.ndarray]
    val: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    test: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    split_timestamp: int | None = None
    quantile: float | None = None
    protocol: str = "temporal"

    def mean_train_length(self) -> float:
        return float(np.mean([len(s) for s in self.train.values()]))

    def to_json(self) -> dict:
        def holdout(d):
            return {u: {"history": h.tolist(), "target": int(t)} for u, (h, t) in sorted(d.items())}
        return {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "protocol": self.protocol,
            "quantile": self.quantile,
            "split_timestamp": self.split_timestamp,
            "n_items": self.n_items,
            "item_ids": list(self.item_ids),
            "train": {u: s.tolist() for u, s in sorted(self.train.items())},
            "val": holdout(self.val),
            "test": holdout(self.test),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceDataset":
        if obj.get("format") != DATASET_FORMAT:
            raise ValueError("not a dataset sidecar")
        if obj["version"] > DATASET_VERSION:
            raise ValueError(f"dataset version {obj['version']} is newer than supported")

        def holdout(d):
            return {u: (np.asarray(v["history"], dtype=np.int64), int(v["target"])) for u, v in d.items()}
        return cls(
            n_items=int(obj["n_items"]),
            item_ids=list(obj["item_ids"]),
            train={u: np.asarray(s, dtype=np.int64) for u, s in obj["train"].items()},
            val=holdout(obj["val"]),
            test=holdout(obj["test"]),
            split_timestamp=obj.get("split_timestamp"),
            quantile=obj.get("quantile"),
            protocol=obj.get("protocol", "temporal"),
        )


def split_quantile_timestamp(timestamps: np.ndarray, quantile: float) -> int:
    """Nearest-rank quantile: the ``ceil(q * n)``-th smallest timestamp."""
    ts = np.sort(np.asarray(timestamps, dtype=np.int64))
    if ts.size == 0:
        raise SplitError("empty log")
    rank = max(1, math.ceil(quantile * ts.size))
    return int(ts[min(rank, ts.size) - 1])


def _user_sequences(log_: InteractionLog, index: dict[str, int]):
    order = np.lexsort((np.arange(len(log_)), log_.timestamps, log_.users))
    users = log_.users[order]
    items = np.array([index[i] for i in log_.items[order].tolist()], dtype=np.int64)
    stamps = log_.timestamps[order]
    cuts = np.flatnonzero(users[1:] != users[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(users)]])
    for a, b in zip(starts.tolist(), ends.tolist()):
        yield str(users[a]), items[a:b], stamps[a:b]


def _item_index(log_: InteractionLog) -> tuple[dict[str, int], list[str]]:
    ids = np.unique(log_.items).tolist()
    return {raw: i + 1 for i, raw in enumerate(ids)}, ids


def _holdouts(seq: np.ndarray):
    test = val = None
    if len(seq) >= 2:
        test = (seq[:-1].copy(), int(seq[-1]))
    if len(seq) >= 3:
        val = (seq[:-2].copy(), int(seq[-2]))
    return val, test


def temporal_split(log_: InteractionLog, quantile: float = 0.95) -> SequenceDataset:
    """Global-timestamp split with leave-one-out holdouts for test users."""
    if len(log_) == 0:
        raise SplitError("cannot split an empty log")
    T = split_quantile_timestamp(log_.timestamps, quantile)
    index, ids = _item_index(log_)
    train, val, test = {}, {}, {}
    n_test_users = 0
    for user, seq, stamps in _user_sequences(log_, index):
        if stamps[-1] >= T:
            n_test_users += 1
            v, t = _holdouts(seq)
            if t is not None:
                test[user] = t
            if v is not None:
                val[user] = v
        else:
            train[user] = seq
    if n_test_users == 0:
        raise SplitError(f"no interactions at or after the split timestamp {T}; lower the quantile")
    if not train:
        raise SplitError(f"every user has interactions at or after {T}; no training data remains. "
                         "Lower the quantile or use the leave-one-out protocol.")
    return SequenceDataset(len(ids), ids, train, val, test, split_timestamp=T, quantile=quantile)


def leave_one_out_split(log_: InteractionLog) -> SequenceDataset:
    """Every user contributes training history, validation and test targets."""
    if len(log_) == 0:
        raise SplitError("cannot split an empty log")
    index, ids = _item_index(log_)
    train, val, test = {}, {}, {}
    for user, seq, _ in _user_sequences(log_, index):
        v, t = _holdouts(seq)
        if t is not None:
            test[user] = t
        if v is not None:
            val[user] = v
        if len(seq) >= 3:
            train[user] = seq[:-2]
    if not train:
        raise SplitError("no user has at least three interactions")
    return SequenceDataset(len(ids), ids, train, val, test, protocol="leave_one_out")


# ---------------------------------------------------------------- sidecar cache

def save_dataset(path, ds: SequenceDataset) -> str:
    """Write the dataset sidecar and return its sha256 digest."""
    blob = json.dumps(ds.to_json(), sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> SequenceDataset:
    return SequenceDataset.from_json(json.loads(Path(path).read_bytes()))


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (s, l), left-padded with 0
    targets: np.ndarray  # (s, l), successor of each input, 0 at padding
    mask: np.ndarray  # (s, l), True at real positions
    users: tuple = ()


def pad_sequence(seq, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs/targets rows for one sequence, keeping its most recent ``l + 1`` items."""
    seq = np.asarray(seq, dtype=np.int64)[-(l + 1):]
    inp = np.zeros(l, dtype=np.int64)
    tgt = np.zeros(l, dtype=np.int64)
    n = len(seq) - 1
    if n > 0:
        inp[l - n:] = seq[:-1]
        tgt[l - n:] = seq[1:]
    return inp, tgt


def pad_history(seq, l: int) -> np.ndarray:
    """Left-pad the last ``l`` items of ``seq`` (used at evaluation)."""
    seq = np.asarray(seq, dtype=np.int64)[-l:]
    row = np.zeros(l, dtype=np.int64)
    if len(seq):
        row[l - len(seq):] = seq
    return row


def make_batches(sequences: dict[str, np.ndarray], s: int, l: int, rng: RngState | None = None,
                 shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; users are shuffled under ``rng``."""
    if s < 1 or l < 1:
        raise ValueError("s and l must be positive")
    users = sorted(sequences)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an RngState")
        users = [users[i] for i in rng.permutation(len(users))]
    for start in range(0, len(users), s):
        chunk = users[start:start + s]
        rows = [pad_sequence(sequences[u], l) for u in chunk]
        inputs = np.stack([r[0] for r in rows])
        targets = np.stack([r[1] for r in rows])
        yield Batch(inputs, targets, targets != 0, tuple(chunk))


# ---------------------------------------------------------------- synthetic data

def synthetic_markov_log(n_users: int = 2000, n_items: int = 2000, mean_len: float = 12.0,
                         follow_prob: float = 0.8, n_successors: int = 1, window: float = 0.35,
                         popularity: float = 0.0, seed: int = 0) -> InteractionLog:
    """Planted next-item structure: each item has ``n_successors`` favoured successors.

    With probability ``follow_prob`` a user moves to one of the current item's
    favoured successors, otherwise to a random item. Random items (and first
    items) are uniform when ``popularity`` is 0, otherwise drawn with
    probability proportional to ``rank ** -popularity`` over a random item
    ranking. Each user is active over a time window of relative length
    ``window`` placed uniformly on a common timeline, so a late-timestamp
    split catches a band of users.
    """
    rng = RngState(seed)
    succ = np.stack([rng.permutation(n_items) + 1 for _ in range(n_successors)], axis=1)
    lengths = np.maximum(3, np.round(mean_len * (0.5 + rng.uniform((n_users,)))).astype(int))
    starts = rng.uniform((n_users,)) * (1.0 - window)
    if popularity > 0:
        ranked = rng.permutation(n_items) + 1
        cdf = np.cumsum(np.arange(1, n_items + 1, dtype=np.float64) ** -popularity)
        cdf /= cdf[-1]

        def draw(shape):
            return ranked[np.minimum(np.searchsorted(cdf, rng.uniform(shape)), n_items - 1)]
    else:
        def draw(shape):
            return rng.integers(1, n_items + 1, shape)
    users, items, stamps = [], [], []
    horizon = 10_000_000
    for u in range(n_users):
        n = int(lengths[u])
        cur = int(draw(()))
        seq = [cur]
        follow = rng.uniform((n,)) < follow_prob
        pick = rng.integers(0, n_successors, (n,))
        rand = draw((n,))
        for i in range(1, n):
            cur = int(succ[cur - 1, pick[i]]) if follow[i] else int(rand[i])
            seq.append(cur)
        t = starts[u] + np.sort(rng.uniform((n,))) * window
        users.extend([f"u{u}"] * n)
        items.extend(f"i{i}" for i in seq)
        stamps.extend((t * horizon).astype(np.int64).tolist())
    return InteractionLog(np.array(users), np.array(items), np.array(stamps, dtype=np.int64))
