"""Train CE and SCE on a small planted-Markov log and compare test metrics.

Runs in a minute or two. Pass ``--full`` for the 2000-item setting used by
the acceptance suite (about ten minutes per model).
"""

import sys

from screc.data import synthetic_markov_log, temporal_split
from screc.harness.train import TrainConfig, train

full = "--full" in sys.argv
n_items = 2000 if full else 300
ds = temporal_split(synthetic_markov_log(n_users=2000 if full else 600, n_items=n_items, mean_len=10, seed=0))
print(f"items {ds.n_items}, train users {len(ds.train)}, test users {len(ds.test)}, "
      f"mean length {ds.mean_train_length():.2f}")

common = dict(max_len=200 if full else 30, batch_size=64, d=64 if full else 32, n_layers=2, dtype="float32",
              max_epochs=15 if full else 6, patience=3, seed=0)
for cfg in (TrainConfig(loss="ce", **common), TrainConfig(loss="sce", b_y=n_items // 8, **common)):
    res = train(cfg, ds, measure_memory=False)
    m = cfg.memory_estimate(ds.n_items, ds.mean_train_length())
    print(f"{cfg.loss:<4} epochs {len(res.history):>2}  {res.seconds:6.1f}s  logits {m.logits_elements:>9}  "
          f"NDCG@10 {res.test.ndcg[10]:.4f}  HR@10 {res.test.hr[10]:.4f}")
