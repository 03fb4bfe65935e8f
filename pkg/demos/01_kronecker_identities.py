"""Kronecker algebra used throughout the package.

The package vectorizes column by column, so a rank-one weight gradient
g a^T becomes kron(a, g).  This script checks that convention and the
commutation and partial-trace tricks that pull the two Kronecker factors
back out of a block.
"""
import numpy as np

from tkfac.kron import CommutationMatrix, kron, partial_trace, vec

rng = np.random.default_rng(0)

a = rng.standard_normal(3)   # layer input
g = rng.standard_normal(2)   # pre-activation gradient
print("vec(g a^T) == kron(a, g):", np.allclose(vec(np.outer(g, a)), kron(a, g).ravel()))

# Partial trace over the output index recovers the input-side factor.
lam, gam = np.outer(a, a), np.outer(g, g)
block = kron(lam, gam)
print("PTr(Lambda (x) Gamma) == tr(Gamma) Lambda:",
      np.allclose(partial_trace(block, 2), np.trace(gam) * lam))

# Conjugating with commutation matrices swaps the factors, so the same
# partial trace now recovers the output side.
swapped = CommutationMatrix(2, 3).conjugate(block, CommutationMatrix(3, 2))
print("K (Lambda (x) Gamma) K == Gamma (x) Lambda:", np.allclose(swapped, kron(gam, lam)))
print("PTr of the swapped block == tr(Lambda) Gamma:",
      np.allclose(partial_trace(swapped, 3), np.trace(lam) * gam))

# The commutation matrix is stored as a permutation; densify only for display.
k = CommutationMatrix(2, 3)
print("K_{2,3} permutation:", k.perm)
print(k.dense().astype(int))
