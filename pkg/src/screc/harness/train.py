"""Training loop with validation-based early stopping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..backbone import BackboneConfig, SASRec, save_checkpoint
from ..data import Batch, SequenceDataset, make_batches
from ..evaluation import MetricsReport, evaluate_model
from ..losses import bce_plus, ce_minus, full_ce, sample_negatives
from ..numerics import RngState
from ..sce import SceConfig, derive_bucket_params, sce_loss
from .memory import LOSSES, estimate_memory
from .optim import Adam

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    loss: str = "ce"
    # backbone
    d: int = 64
    n_layers: int = 2
    n_heads: int = 1
    dropout: float = 0.2
    max_len: int = 50  # l
    dtype: str = "float32"
    tied: bool = True
    # batching and optimisation
    batch_size: int = 128  # s
    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    max_steps: int | None = None
    seed: int = 0
    # sampled losses
    k: int = 1
    # SCE; n_b and b_x are derived from alpha/beta when left as None
    n_b: int | None = None
    b_x: int | None = None
    b_y: int | None = None
    alpha: float = 2.0
    beta: float = 1.0
    use_mix: bool = True
    mix_target: str = "x"
    # evaluation
    exclude_history: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        for name in ("d", "n_layers", "n_heads", "max_len", "batch_size", "max_epochs", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def backbone(self, n_items: int) -> BackboneConfig:
        return BackboneConfig(n_items=n_items, max_len=self.max_len, d=self.d, n_layers=self.n_layers,
                              n_heads=self.n_heads, dropout=self.dropout, tied=self.tied, dtype=self.dtype)

    def sce_config(self, n_items: int, l_bar: float) -> SceConfig:
        n_b, b_x = self.n_b, self.b_x
        if n_b is None or b_x is None:
            dn, dx = derive_bucket_params(self.batch_size, self.max_len, l_bar, self.alpha, self.beta)
            n_b = dn if n_b is None else n_b
            b_x = dx if b_x is None else b_x
        b_y = self.b_y if self.b_y is not None else max(1, n_items // 8)
        return SceConfig(n_b=n_b, b_x=b_x, b_y=min(b_y, n_items), use_mix=self.use_mix,
                         mix_target=self.mix_target, alpha=self.alpha, beta=self.beta)

    def memory_estimate(self, n_items: int, l_bar: float):
        kw = {}
        if self.loss == "sce":
            sc = self.sce_config(n_items, l_bar)
            kw = dict(n_b=sc.n_b, b_x=sc.b_x, b_y=sc.b_y)
        return estimate_memory(self.loss, self.batch_size, self.max_len, n_items, self.d, self.k, **kw)


@dataclass
class TrainResult:
    model: SASRec
    config: TrainConfig
    history: list = field(default_factory=list)  # one dict per evaluated epoch
    steps: list = field(default_factory=list)  # one dict per optimisation step
    best_epoch: int = 0
    best_val_ndcg10: float = float("-inf")
    test: MetricsReport | None = None
    test_all_items: MetricsReport | None = None
    seconds: float = 0.0
    peak_bytes: int | None = None


class Trainer:
    """Owns the model, optimiser and random streams for one run.

    Separate streams drive shuffling, dropout and loss-side sampling
    (negatives or bucket centres), so swapping the loss leaves the other two
    untouched.
    """

    def __init__(self, config: TrainConfig, dataset: SequenceDataset):
        self.config = config
        self.dataset = dataset
        self.n_items = dataset.n_items
        self.l_bar = dataset.mean_train_length()
        self.model = SASRec(config.backbone(self.n_items), seed=config.seed)
        self.opt = Adam(self.model.parameters(), lr=config.lr, betas=config.betas,
                        weight_decay=config.weight_decay)
        root = RngState(config.seed)
        self.shuffle_rng = root.spawn(1)
        self.dropout_rng = root.spawn(2)
        self.loss_rng = root.spawn(3)
        self.sce = config.sce_config(self.n_items, self.l_bar) if config.loss == "sce" else None
        self.step_count = 0

    def loss_on(self, batch: Batch):
        cfg = self.config
        X = self.model.forward(batch.inputs, training=True, rng=self.dropout_rng)
        Y = self.model.tied_catalog()
        targets = batch.targets.reshape(-1)
        mask = batch.mask.reshape(-1)
        if cfg.loss == "ce":
            return full_ce(X, Y, targets, mask)
        if cfg.loss == "sce":
            return sce_loss(X, Y, targets, self.sce, mask, self.loss_rng, strict=False)
        k = 1 if cfg.loss == "bce" else cfg.k
        neg = sample_negatives(targets, k, self.n_items, self.loss_rng)
        if cfg.loss in ("bce", "bce_plus"):
            return bce_plus(X, Y, targets, neg, mask)
        return ce_minus(X, Y, targets, neg, mask)

    def step(self, batch: Batch, measure: bool = False) -> dict:
        self.opt.zero_grad()
        if measure:
            with nx.track_memory() as mem:
                out = self.loss_on(batch)
                value = out.item()
                self._check(value, batch)
                nx.backward(out.value)
            peak = mem.peak
        else:
            out = self.loss_on(batch)
            value = out.item()
            self._check(value, batch)
            nx.backward(out.value)
            peak = None
        self.opt.step()
        self.step_count += 1
        rec = {"step": self.step_count, "loss": value}
        if hasattr(out, "unique_selection_fraction"):
            rec["unique_selection_fraction"] = out.unique_selection_fraction
            rec["correct_logit_fraction"] = out.correct_logit_fraction
            rec["covered_positions"] = out.covered_positions
        if peak is not None:
            rec["peak_bytes"] = int(peak)
        return rec

    def _check(self, value: float, batch: Batch) -> None:
        if np.isfinite(value):
            return
        norms = {k: float(np.linalg.norm(p.data)) for k, p in self.model.params.items()}
        dump = {"step": self.step_count + 1, "loss": str(value), "param_norms": norms,
                "users": list(batch.users)}
        raise DivergenceError(f"non-finite loss at step {self.step_count + 1}: {json.dumps(dump)}")

    def epoch_batches(self):
        cfg = self.config
        for batch in make_batches(self.dataset.train, cfg.batch_size, cfg.max_len, self.shuffle_rng):
            if batch.mask.any():
                yield batch


def train(config: TrainConfig, dataset: SequenceDataset, out_dir=None, measure_memory: bool = True,
          on_step=None) -> TrainResult:
    """Fit a model, early-stopping on validation NDCG@10, and report test metrics.

    With ``patience = p`` training stops once ``p + 1`` consecutive
    evaluations fail to improve on the best score. The best parameters are
    restored before testing. ``out_dir`` (optional) receives ``steps.jsonl``,
    ``epochs.jsonl``, ``model.npz`` and ``metrics.json``.
    """
    cfg = config
    trainer = Trainer(cfg, dataset)
    res = TrainResult(trainer.model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    step_fh = epoch_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        step_fh = open(out / "steps.jsonl", "w")
        epoch_fh = open(out / "epochs.jsonl", "w")
    best_state = trainer.model.state_dict()
    bad_epochs = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            te = time.perf_counter()
            losses = []
            for batch in trainer.epoch_batches():
                rec = trainer.step(batch, measure=measure_memory and res.peak_bytes is None)
                rec["epoch"] = epoch
                if "peak_bytes" in rec:
                    res.peak_bytes = rec["peak_bytes"]
                losses.append(rec["loss"])
                res.steps.append(rec)
                if step_fh:
                    step_fh.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
                if cfg.max_steps is not None and trainer.step_count >= cfg.max_steps:
                    break
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                     "seconds": time.perf_counter() - te}
            stop = cfg.max_steps is not None and trainer.step_count >= cfg.max_steps
            if epoch % cfg.eval_every == 0 or stop or epoch == cfg.max_epochs:
                val = evaluate_model(trainer.model, dataset.val, cfg.exclude_history)
                entry.update({f"val_{k}": v for k, v in val.to_dict().items()})
                score = val.ndcg.get(10, 0.0)
                if score > res.best_val_ndcg10:
                    res.best_val_ndcg10 = score
                    res.best_epoch = epoch
                    best_state = trainer.model.state_dict()
                    bad_epochs = 0
                else:
                    bad_epochs += 1
            res.history.append(entry)
            if epoch_fh:
                epoch_fh.write(json.dumps(entry) + "\n")
            log.info("epoch %d: %s", epoch, entry)
            if stop or bad_epochs > cfg.patience:
                break
    finally:
        if step_fh:
            step_fh.close()
            epoch_fh.close()
    res.seconds = time.perf_counter() - t0
    trainer.model.load_state_dict(best_state)
    res.test = evaluate_model(trainer.model, dataset.test, cfg.exclude_history)
    res.test_all_items = evaluate_model(trainer.model, dataset.test, not cfg.exclude_history)
    if out is not None:
        save_checkpoint(out / "model.npz", trainer.model, extra={"train_config": cfg.to_dict()})
        summary = {
            "config_id": cfg.config_id(),
            "config": cfg.to_dict(),
            "best_epoch": res.best_epoch,
            "best_val_ndcg@10": res.best_val_ndcg10,
            "seconds": res.seconds,
            "seconds_per_epoch": res.seconds / max(1, len(res.history)),
            "peak_bytes": res.peak_bytes,
            "memory_estimate": cfg.memory_estimate(dataset.n_items, dataset.mean_train_length()).to_dict(),
            "test": res.test.to_dict(),
            "test_other_exclusion_mode": res.test_all_items.to_dict(),
        }
        (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    return res
