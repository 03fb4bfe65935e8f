"""Exact layer Fisher blocks versus their KFAC and TKFAC factorizations.

A small sigmoid network is run on a random batch with labels sampled from
the model.  For every layer we build the exact block, both factorizations,
their Frobenius errors and the two error bounds, and check that TKFAC keeps
the trace of the exact block.
"""
import numpy as np

from tkfac import analysis, fisher
from tkfac.net import backward, build_network, forward

rng = np.random.default_rng(1)
net = build_network("8-6-6-4", hidden_activation="sigmoid", rng=rng)
x = rng.standard_normal((32, 8))
_, cache = forward(net, x)
trace = backward(net, cache, label_mode="model-sample", rng=rng)

print(f"{'layer':>5} {'dim':>5} {'tr(F)':>10} {'tr(TKFAC)':>10} {'TKFAC err':>10} "
      f"{'KFAC err':>10} {'TKFAC bnd':>10} {'KFAC bnd':>10}")
for e in analysis.error_report(trace).layers:
    print(f"{e.layer:>5} {e.dim:>5} {e.trace_exact:10.4g} {e.trace_tkfac:10.4g} "
          f"{e.tkfac_error:10.4g} {e.kfac_error:10.4g} {e.tkfac_bound:10.4g} {e.kfac_bound:10.4g}")

# With one sample the TKFAC block is exact and the bound collapses to zero.
_, cache1 = forward(net, x[:1])
one = backward(net, cache1, label_mode="model-sample", rng=rng)
ex = fisher.exact_fim_dense(one, 0)
print("single-sample TKFAC error:",
      analysis.approx_error(ex, fisher.tkfac_factors_dense(one, 0)),
      "bound:", analysis.tkfac_bound(ex.samples()))
