"""Bucketed loss next to full cross-entropy on random embeddings.

With one bucket that covers every position and every item the two losses
agree exactly. Shrinking the buckets lowers the loss (it only sees the
hardest negatives it can find) and shrinks the logit buffer.
"""

import numpy as np

from screc import numerics as nx
from screc.losses import full_ce
from screc.sce import SceConfig, sce_loss

rng = np.random.default_rng(0)
N, C, d = 64, 500, 16
X = rng.normal(size=(N, d))
Y = rng.normal(size=(C, d))
targets = rng.integers(1, C + 1, size=N)
mask = np.ones(N, bool)

ce = full_ce(nx.Tensor(X), nx.Tensor(Y), targets, mask).item()
print(f"full cross-entropy          {ce:.6f}   logits {N * C}")

for n_b, b_x, b_y in [(1, N, C), (8, 16, 100), (8, 16, 25), (16, 8, 10)]:
    out = sce_loss(nx.Tensor(X), nx.Tensor(Y), targets, SceConfig(n_b, b_x, b_y), mask, nx.RngState(1))
    print(f"n_b={n_b:<3} b_x={b_x:<3} b_y={b_y:<4}  {out.value.item():.6f}   logits {n_b * b_x * b_y:<6} "
          f"covered {out.covered_positions}/{N}  unique {out.unique_selection_fraction:.3f}")
