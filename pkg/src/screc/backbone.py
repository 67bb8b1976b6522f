"""Compact SASRec-style causal transformer.

The item-embedding table has ``C + 1`` rows; row 0 is padding, held at zero
and never updated. With weight tying (the default) rows ``1..C`` double as
the classification matrix, so logits are plain dot products between model
outputs and item embeddings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import RngState, Tensor

CHECKPOINT_FORMAT = "screc-checkpoint"
CHECKPOINT_VERSION = 1
PAD = 0


@dataclass
class BackboneConfig:
    n_items: int  # catalog size C
    max_len: int = 50  # l
    d: int = 64
    n_layers: int = 2
    n_heads: int = 1
    dropout: float = 0.2
    tied: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_items < 1:
            raise ValueError("catalog size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")


def _init_params(cfg: BackboneConfig, rng: RngState) -> dict[str, np.ndarray]:
    dt = np.dtype(cfg.dtype)
    d = cfg.d
    scale = 1.0 / np.sqrt(d)
    p: dict[str, np.ndarray] = {}
    emb = rng.normal((cfg.n_items + 1, d)) * scale
    emb[PAD] = 0.0
    p["item_emb"] = emb
    p["pos_emb"] = rng.normal((cfg.max_len, d)) * scale
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
            p[pre + name] = rng.normal((d, d)) * scale
        for name in ("bq", "bk", "bv", "bo", "ff1_b", "ff2_b"):
            p[pre + name] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = np.ones(d)
            p[pre + ln + ".b"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    if not cfg.tied:
        p["out_emb"] = rng.normal((cfg.n_items, d)) * scale
    return {k: v.astype(dt) for k, v in p.items()}


class SASRec:
    """Unidirectional transformer over left-padded item sequences."""

    def __init__(self, config: BackboneConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        if params is None:
            params = _init_params(config, RngState(seed))
        self.params: dict[str, Tensor] = {
            k: Tensor(np.asarray(v), requires_grad=True) for k, v in params.items()
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def item_emb(self) -> Tensor:
        return self.params["item_emb"]

    def tied_catalog(self) -> Tensor:
        """Classification matrix ``Y`` of shape ``(C, d)``.

        Under weight tying this is a view of embedding rows ``1..C``: writes to
        either are visible in the other and gradients flow into the table.
        """
        if self.config.tied:
            return nx.slice_rows(self.item_emb, 1, self.config.n_items + 1)
        return self.params["out_emb"]

    def forward(self, inputs: np.ndarray, training: bool = False, rng: RngState | None = None) -> Tensor:
        """Per-position outputs ``X`` of shape ``(s * l, d)``.

        Row ``u * l + i`` sees only inputs ``inputs[u, :i + 1]``. Rows at padded
        positions carry no meaning and must be masked downstream.
        """
        cfg = self.config
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be (s, l), got {inputs.shape}")
        s, l = inputs.shape
        if l > cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {cfg.max_len}")
        if inputs.size and (inputs.min() < 0 or inputs.max() > cfg.n_items):
            raise IndexError(f"item index outside [0, {cfg.n_items}]")
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training with dropout needs an RngState")
        P = self.params
        d = cfg.d
        real = (inputs != PAD)
        keep = real[..., None].astype(cfg.dtype)

        h = nx.index_select(P["item_emb"], inputs, zero_rows=(PAD,)) * np.sqrt(d)
        h = h + nx.slice_rows(P["pos_emb"], cfg.max_len - l, cfg.max_len)
        h = nx.dropout(h, cfg.dropout, rng, training)
        h = h * keep

        # query i may attend key j <= i when key j is a real item; padded
        # queries attend only to themselves so every softmax row has support
        causal = np.tril(np.ones((l, l), dtype=bool))
        attn_keep = causal[None] & (real[:, None, :] | np.eye(l, dtype=bool)[None])

        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a = nx.layer_norm(h, P[pre + "ln1.g"], P[pre + "ln1.b"])
            h = h + self._attention(a, attn_keep, pre, training, rng)
            f = nx.layer_norm(h, P[pre + "ln2.g"], P[pre + "ln2.b"])
            f = nx.relu(nx.matmul(f, P[pre + "ff1"]) + P[pre + "ff1_b"])
            f = nx.dropout(f, cfg.dropout, rng, training)
            f = nx.matmul(f, P[pre + "ff2"]) + P[pre + "ff2_b"]
            f = nx.dropout(f, cfg.dropout, rng, training)
            h = (h + f) * keep
        h = nx.layer_norm(h, P["ln_f.g"], P["ln_f.b"])
        return h.reshape(s * l, d)

    def _attention(self, a: Tensor, keep: np.ndarray, pre: str, training: bool, rng) -> Tensor:
        cfg = self.config
        P = self.params
        s, l, d = a.shape
        nh = cfg.n_heads
        dh = d // nh
        q = nx.matmul(a, P[pre + "wq"]) + P[pre + "bq"]
        k = nx.matmul(a, P[pre + "wk"]) + P[pre + "bk"]
        v = nx.matmul(a, P[pre + "wv"]) + P[pre + "bv"]
        if nh > 1:
            q, k, v = (nx.transpose(t.reshape(s, l, nh, dh), (0, 2, 1, 3)) for t in (q, k, v))
            keep = keep[:, None]
        scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(dh))
        w = nx.masked_softmax(scores, keep)
        out = nx.matmul(w, v)
        if nh > 1:
            out = nx.transpose(out, (0, 2, 1, 3)).reshape(s, l, d)
        return nx.matmul(out, P[pre + "wo"]) + P[pre + "bo"]

    # ---------------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "SASRec":
        return load_checkpoint(path)


def save_checkpoint(path, model: SASRec, extra: dict | None = None) -> None:
    """Write a checkpoint as an ``.npz`` of named arrays plus a JSON header.

    The header (array ``__header__``) records format, version, backbone
    config and the shape of every array.
    """
    arrays = model.state_dict()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> SASRec:
    with np.load(path) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {header['version']} is newer than supported")
        arrays = {k: npz[k] for k in header["shapes"]}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"{path}: array {k} has shape {arrays[k].shape}, header says {shape}")
    return SASRec(BackboneConfig(**header["config"]), params=arrays)
