"""Analytic and measured loss memory for each loss family."""

from screc.harness.memory import estimate_memory, format_bytes, measure_loss_memory

# catalog-scale estimate, nothing is allocated
for loss in ("ce", "bce", "ce_minus", "sce"):
    kw = {"k": 256} if loss == "ce_minus" else {}
    if loss == "sce":
        kw = {"n_b": 320, "b_x": 320, "b_y": 4096}
    est = estimate_memory(loss, 128, 200, 1_000_000, **kw)
    print(f"{loss:<9} s=128 l=200 C=1e6   logits {format_bytes(est.logits_bytes):>10}")

# small enough to run under the counting allocator
s, l, C, d = 32, 50, 20000, 32
for loss, kw in [("ce", {}), ("ce_minus", {"k": 256}), ("sce", {"n_b": 16, "b_x": 400, "b_y": 400})]:
    m = measure_loss_memory(loss, s, l, C, d, **kw)
    print(f"{loss:<9} measured peak {format_bytes(m.total_peak_bytes):>10}   analytic {format_bytes(m.analytic_bytes):>10}")
