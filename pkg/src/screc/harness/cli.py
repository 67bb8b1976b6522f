"""Command-line entry point: ``screc <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..backbone import load_checkpoint
from ..data import (IngestionError, leave_one_out_split, load_dataset, load_interactions, p_core_filter, save_dataset,
                    synthetic_markov_log, temporal_split)
from ..evaluation import evaluate_model
from .memory import LOSSES, estimate_memory, format_bytes, measure_loss_memory
from .sweep import expand_grid, pareto_sweep
from .train import DivergenceError, TrainConfig, Trainer, train

# short aliases for the most used TrainConfig fields
_ALIASES = {"batch_size": ["--s"], "max_len": ["--l"]}


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of TrainConfig fields; flags override it")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        names = ["--" + f.name.replace("_", "-")] + _ALIASES.get(f.name, [])
        kw = {"dest": f.name, "default": argparse.SUPPRESS}
        if f.name == "loss":
            kw["choices"] = LOSSES
        elif f.name == "betas":
            kw.update(type=float, nargs=2)
        elif f.type in ("bool", bool):
            kw["type"] = _bool
        elif f.type in ("int", "int | None", int):
            kw["type"] = int
        elif f.type in ("float", float):
            kw["type"] = float
        g.add_argument(*names, **kw)


def _config_from(args) -> TrainConfig:
    d = json.loads(args.config.read_text()) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(TrainConfig):
        if f.name != "seed" and f.name in vars(args):
            d[f.name] = getattr(args, f.name)
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="screc", description="Sequential recommenders with scalable cross-entropy.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, filter and split an interaction log into a dataset file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="CSV/TSV interaction log")
    src.add_argument("--synthetic", action="store_true", help="generate a planted Markov log instead")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "tsv"))
    p.add_argument("--columns", default="user,item,timestamp", help="comma-separated column names in file order")
    p.add_argument("--dedup", action="store_true")
    p.add_argument("--max-malformed", type=float, default=0.01)
    p.add_argument("--min-item", type=int, default=5, help="p-core item threshold (0 disables)")
    p.add_argument("--min-user", type=int, default=20, help="p-core user threshold (0 disables)")
    p.add_argument("--iterate-core", action="store_true", help="repeat filtering to a fixpoint")
    p.add_argument("--protocol", choices=("temporal", "leave-one-out"), default="temporal")
    p.add_argument("--quantile", type=float, default=0.95)
    p.add_argument("--n-users", type=int, default=2000)
    p.add_argument("--n-items", type=int, default=2000)
    p.add_argument("--mean-len", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for logs, checkpoint and metrics")
    p.add_argument("--seed", type=int)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a held-out split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--keep-history", action="store_true", help="do not exclude already-seen items")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("estimate-mem", help="analytic loss memory (optionally measured)")
    p.add_argument("--loss", choices=LOSSES, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n-b", type=int)
    p.add_argument("--b-x", type=int)
    p.add_argument("--b-y", type=int)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--l-bar", type=float, help="mean sequence length used to derive n_b and b_x")
    p.add_argument("--measure", action="store_true", help="also run the loss under the counting allocator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("sweep", help="run a config grid and extract the memory/quality Pareto front")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("diagnose", help="per-step SCE selection diagnostics as CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", type=Path, help="CSV path (stdout when omitted)")
    p.add_argument("--compare-mix", action="store_true", help="run with and without Mix")
    p.add_argument("--seed", type=int)
    _add_config_flags(p)
    return ap


# ---------------------------------------------------------------- subcommands

def cmd_prepare(args) -> int:
    if args.synthetic:
        log_ = synthetic_markov_log(args.n_users, args.n_items, args.mean_len, seed=args.seed)
    else:
        log_ = load_interactions(args.input, args.format, args.columns.split(","), dedup=args.dedup,
                                 max_malformed=args.max_malformed)
    if args.min_item > 0 or args.min_user > 0:
        log_ = p_core_filter(log_, args.min_item, args.min_user, iterate=args.iterate_core)
    ds = temporal_split(log_, args.quantile) if args.protocol == "temporal" else leave_one_out_split(log_)
    digest = save_dataset(args.out, ds)
    print(f"items: {ds.n_items}  train users: {len(ds.train)}  val: {len(ds.val)}  test: {len(ds.test)}  "
          f"mean train length: {ds.mean_train_length():.2f}")
    print(f"wrote {args.out}  sha256 {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    ds = load_dataset(args.data)
    if cfg.loss == "sce":
        sc = cfg.sce_config(ds.n_items, ds.mean_train_length())
        print(f"sce buckets: n_b={sc.n_b} b_x={sc.b_x} b_y={sc.b_y} mix={sc.use_mix}")
    res = train(cfg, ds, out_dir=args.out, on_step=None)
    for h in res.history:
        print(json.dumps({k: h[k] for k in ("epoch", "train_loss", "seconds", "val_ndcg@10") if k in h}))
    print(f"best epoch {res.best_epoch}, {res.seconds:.1f}s")
    print(res.test.pretty())
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    rep = evaluate_model(model, ds.test if args.split == "test" else ds.val, not args.keep_history)
    print(rep.to_json() if args.json else rep.pretty())
    return 0


def cmd_estimate_mem(args) -> int:
    n_b, b_x = args.n_b, args.b_x
    if args.loss == "sce" and (n_b is None or b_x is None):
        from ..sce import derive_bucket_params
        dn, dx = derive_bucket_params(args.s, args.l, args.l_bar or args.l, args.alpha, args.beta)
        n_b, b_x = n_b or dn, b_x or dx
    b_y = args.b_y if args.b_y is not None else (max(1, args.C // 8) if args.loss == "sce" else None)
    if args.measure:
        est = measure_loss_memory(args.loss, args.s, args.l, args.C, args.d, args.k, n_b, b_x, b_y, seed=args.seed)
    else:
        est = estimate_memory(args.loss, args.s, args.l, args.C, args.d, args.k, n_b, b_x, b_y)
    if args.json:
        print(json.dumps(est.to_dict()))
        return 0
    print(format_bytes(est.logits_bytes))
    print(f"logits: {est.logits_elements} elements  auxiliary: {est.auxiliary_elements} elements  "
          f"analytic total: {format_bytes(est.analytic_bytes)}")
    if args.loss == "sce":
        print(f"buckets: n_b={n_b} b_x={b_x} b_y={b_y}")
    if est.total_peak_bytes is not None:
        print(f"measured peak: {format_bytes(est.total_peak_bytes)}")
    return 0


def cmd_sweep(args) -> int:
    grid = json.loads(args.grid.read_text())
    if args.seed is not None:
        grid.setdefault("base", {})["seed"] = args.seed
    configs = expand_grid(grid)
    ds = load_dataset(args.data)
    front, rows = pareto_sweep(configs, ds, args.out, workers=args.workers)
    failed = sum(r.get("status") != "ok" for r in rows)
    print(f"{len(rows)} configs, {failed} failed, {len(front)} on the front")
    for p in front:
        print(f"  {p.config_id}  {format_bytes(p.peak_bytes):>10}  ndcg@10={p.ndcg10:.4f}")
    return 0


def diagnostic_series(cfg: TrainConfig, ds, steps: int) -> list[dict]:
    """Per-step loss and selection diagnostics for ``steps`` optimisation steps."""
    trainer = Trainer(cfg, ds)
    out = []
    while len(out) < steps:
        n0 = len(out)
        for batch in trainer.epoch_batches():
            out.append(trainer.step(batch))
            if len(out) >= steps:
                break
        if len(out) == n0:
            raise ValueError("dataset yields no training batches")
    return out


def cmd_diagnose(args) -> int:
    cfg = _config_from(args)
    if cfg.loss != "sce":
        cfg = dataclasses.replace(cfg, loss="sce")
    ds = load_dataset(args.data)
    variants = [True, False] if args.compare_mix else [cfg.use_mix]
    fields = ["mix", "step", "loss", "unique_selection_fraction", "correct_logit_fraction", "covered_positions"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for mix in variants:
            for rec in diagnostic_series(dataclasses.replace(cfg, use_mix=mix), ds, args.steps):
                w.writerow({"mix": mix, **rec})
    finally:
        if args.out:
            fh.close()
    return 0


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "estimate-mem": cmd_estimate_mem, "sweep": cmd_sweep, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, IngestionError, DivergenceError) as exc:
        print(f"screc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
