"""Dense Kronecker algebra: kron, column-major vec, partial trace, commutation.

Convention used everywhere in the package: ``vec`` stacks columns, so for an
``m x n`` weight gradient ``g a^T`` we get ``vec(g a^T) == kron(a, g)``.  Layer
Fisher blocks are therefore ordered "input index major, output index minor".
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a symmetric factorization fails even after jitter."""


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    return a


def kron(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a, b = _as_matrix(a), _as_matrix(b)
    m, n = a.shape
    p, q = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(m * p, n * q)


def vec(a):
    """Column-stacking vectorization."""
    return _as_matrix(a).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols, order="F")


def partial_trace(a, q):
    """Matrix of blockwise traces of ``a`` viewed as a grid of ``q x q`` blocks.

    ``partial_trace(kron(A, B), B.shape[0]) == trace(B) * A``.
    """
    a = _as_matrix(a)
    r, c = a.shape
    if q < 1 or r % q or c % q:
        raise ValueError(f"shape {a.shape} is not divisible into {q}x{q} blocks")
    blocks = a.reshape(r // q, q, c // q, q)
    return np.einsum("iaja->ij", blocks)


@dataclass(frozen=True)
class CommutationMatrix:
    """The permutation ``K_mn`` with ``K_mn @ vec(A) == vec(A.T)`` for ``A`` of shape ``(m, n)``.

    Stored as an index permutation; :meth:`dense` materializes it.
    """

    m: int
    n: int

    @property
    def perm(self):
        # vec(A.T)[k] = vec(A)[perm[k]]
        idx = np.arange(self.m * self.n).reshape(self.m, self.n, order="F")
        return vec(idx.T).astype(np.intp)

    def dense(self):
        size = self.m * self.n
        k = np.zeros((size, size))
        k[np.arange(size), self.perm] = 1.0
        return k

    def apply(self, v):
        return commutation_apply(self, v)

    def conjugate(self, x, right):
        """``self @ x @ right`` without materializing either permutation."""
        x = _as_matrix(x)
        if x.shape != (self.m * self.n, right.m * right.n):
            raise ValueError(f"cannot conjugate a {x.shape} matrix by K_{self.m},{self.n}"
                             f" and K_{right.m},{right.n}")
        # (K x)[i] = x[perm[i]]; (x K')[:, j] = x[:, inv(perm')[j]]
        return x[self.perm][:, np.argsort(right.perm)]


def commutation_apply(k, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != k.m * k.n:
        raise ValueError(f"vector of length {v.size} does not match K_{k.m},{k.n}")
    return v[k.perm]


def frob_norm(a):
    return float(np.linalg.norm(_as_matrix(a), "fro"))


def trace(a):
    return float(np.trace(_as_matrix(a)))


def sym_inverse(a, jitter=0.0, max_jitter=None):
    """Inverse of a symmetric positive definite matrix via Cholesky.

    ``jitter`` is added to the diagonal first.  If the factorization fails the
    jitter is escalated by factors of ten (starting from ``1e-12`` times the mean
    diagonal when ``jitter`` is zero) until ``max_jitter``, which defaults to
    ``1e-6`` times the mean absolute diagonal.
    """
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_inverse needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SingularMatrixError("matrix has non-finite entries")
    a = 0.5 * (a + a.T)
    scale = float(np.mean(np.abs(np.diag(a)))) or 1.0
    if max_jitter is None:
        max_jitter = max(jitter, 1e-6 * scale)
    eye = np.eye(a.shape[0])
    current = jitter
    while True:
        try:
            c, low = scipy.linalg.cho_factor(a + current * eye, lower=True)
            return scipy.linalg.cho_solve((c, low), eye)
        except np.linalg.LinAlgError:
            pass
        if current >= max_jitter:
            raise SingularMatrixError(
                f"Cholesky failed with jitter up to {current:.3g}")
        current = min(max_jitter, current * 10 if current > 0 else 1e-12 * scale)
