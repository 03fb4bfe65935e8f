"""Train the 196-20-20-20-20-10 ReLU network on downsampled MNIST with TKFAC
and track the exact-Fisher approximation error of TKFAC and KFAC every 100
iterations.  Uses the bundled 5000-image subset unless TKFAC_DATA_DIR points
at a full MNIST download.  Takes about 15 seconds.
"""
import numpy as np

from tkfac.analysis import error_curve
from tkfac.data import load_mnist
from tkfac.net import build_network
from tkfac.optim import make_optimizer, run_training

x, y = load_mnist(downsample=True)
net = build_network("196-20-20-20-20-10", rng=0)
opt = make_optimizer("tkfac_nor", alpha=0.03, lam=0.03)
curve = error_curve(every=100)
res = run_training(net, opt, x, y, iterations=2000, batch_size=500, seed=0,
                   hooks=[curve], log_every=500)

for r in res.records:
    print(f"iter {r.iteration:5d}  loss {r.train_loss:.4f}  error {r.train_error:.4f}")
print("\niter   sum TKFAC err   sum KFAC err")
for rep in curve.reports:
    print(f"{rep.iteration:5d}   {rep.tkfac_total:12.4e}   {rep.kfac_total:12.4e}")
wins = np.mean([r.tkfac_total <= r.kfac_total for r in curve.reports])
print(f"TKFAC at or below KFAC at {100 * wins:.0f}% of the points")
