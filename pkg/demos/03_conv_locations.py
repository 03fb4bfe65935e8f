"""Conv layers: exact block, the per-location sum of Kroneckers, and how
correlated the products at different spatial locations are.

The sum-of-Kroneckers form drops cross-location terms.  The gap between it
and the exact block is printed next to the average off-diagonal location
correlation, first for an untrained random conv net and then for data
where every sample uses a single location (the gap vanishes).
"""
import numpy as np

from tkfac import analysis, fisher
from tkfac.kron import frob_norm
from tkfac.net import backward, build_network, forward

rng = np.random.default_rng(2)
net = build_network("1x6x6-c3k3-c2k2s2-4", rng=rng)
x = rng.standard_normal((256, 1, 6, 6))
_, cache = forward(net, x)
trace = backward(net, cache, label_mode="model-sample", rng=rng)

for l in range(2):
    ex = fisher.exact_fim_conv(trace, l).matrix
    sk = fisher.sum_kron_fim_conv(trace, l)
    corr, _ = analysis.location_correlation(trace, l)
    off = corr[~np.eye(corr.shape[0], dtype=bool)]
    tk = fisher.tkfac_factors_conv(trace, l)
    print(f"layer {l}: o={corr.shape[0]:2d}  ||F - sumkron||/||F|| = "
          f"{frob_norm(ex - sk) / frob_norm(ex):.3f}  mean |corr| = {off.mean():.3f}  "
          f"tr(TKFAC)/tr(sumkron) = {tk.delta / np.trace(sk):.12f}")

# Keep one location per sample: cross-location products vanish identically.
a = trace.acts[0]
keep = rng.integers(0, a.shape[2], size=a.shape[0])
mask = np.zeros_like(a)
mask[np.arange(a.shape[0]), :, keep] = 1.0
trace.acts[0] = a * mask
gap = frob_norm(fisher.exact_fim_conv(trace, 0).matrix - fisher.sum_kron_fim_conv(trace, 0))
print("single-location data, ||F - sumkron|| =", gap)
