"""The trace-scaled damping on a small CNN.

Conv layers clamp their trace coefficient at nu and damp with a diagonal
proportional to it, so no damping strength has to be tuned.  The dense
classifier layer is rescaled by beta, the largest clamp ratio among all
layers.  The script prints the coefficients and beta at a few refreshes.
"""
from tkfac.data import load_mnist
from tkfac.net import build_network
from tkfac.optim import make_optimizer, run_training

x, y = load_mnist(downsample=True)
x = x.reshape(-1, 1, 14, 14)
net = build_network("1x14x14-c4k3p1-c8k3s2p1-10", rng=0)
opt = make_optimizer("tkfac_new", alpha=0.01, nu=1.0, t_fim=10, t_inv=10)
res = run_training(net, opt, x, y, iterations=500, batch_size=100, seed=0, log_every=100)

for r in res.records:
    print(f"iter {r.iteration:4d}  loss {r.train_loss:.4f}  error {r.train_error:.4f}")
print("\nrefresh  delta (conv1, conv2, fc)        delta used            beta   min eig")
for h in opt.history[::5]:
    d = ", ".join(f"{v:7.3f}" for v in h["delta"])
    u = ", ".join(f"{v:7.3f}" for v in h["delta_used"])
    print(f"{h['iteration']:7d}  {d}   {u}   {h['beta']:6.2f}  {min(h['min_eig']):.2e}")
