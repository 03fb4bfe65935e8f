"""Exact layer Fisher blocks and their KFAC / TKFAC factorizations.

Expectations are batch means over the samples of a :class:`~tkfac.net.BatchTrace`.
With ``Lambda = a a^T`` and ``Gamma = g g^T`` per sample, a dense layer's block is
``F = E[Lambda (x) Gamma]`` and TKFAC replaces it by ``delta * Phi (x) Psi`` with

    delta = E[tr(Lambda) tr(Gamma)]
    Phi   = E[tr(Gamma) Lambda] / delta
    Psi   = E[tr(Lambda) Gamma] / delta

so that ``tr(Phi) == tr(Psi) == 1`` and ``tr(delta Phi (x) Psi) == tr(F)``.
"""
from dataclasses import dataclass

import numpy as np

from .kron import kron

DEGENERATE_DELTA = 1e-30


class DegenerateBlock(ValueError):
    """The trace coefficient of a block is (numerically) zero."""


@dataclass
class ExactFisherBlock:
    """Exact Fisher block of one layer plus the per-sample ingredients it was built from.

    ``a`` and ``g`` are the per-sample vectors whose outer products give the
    per-sample ``Lambda`` and ``Gamma`` (dense layers).  For conv layers they are
    ``None``.
    """

    layer: int
    matrix: np.ndarray
    n_samples: int
    a: np.ndarray = None
    g: np.ndarray = None

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def lambda_traces(self):
        return np.einsum("ni,ni->n", self.a, self.a)

    @property
    def gamma_traces(self):
        return np.einsum("ni,ni->n", self.g, self.g)

    def samples(self):
        """Per-sample ``(Lambda_i, Gamma_i)`` pairs (dense layers only)."""
        if self.a is None:
            raise TypeError("per-sample Kronecker pairs exist only for dense layers")
        return [(np.outer(a, a), np.outer(g, g)) for a, g in zip(self.a, self.g)]


@dataclass
class FisherFactors:
    """``delta * Phi (x) Psi`` with unit-trace ``Phi`` (input side) and ``Psi`` (output side)."""

    delta: float
    phi: np.ndarray
    psi: np.ndarray

    def dense(self):
        return self.delta * kron(self.phi, self.psi)


def _check_kind(trace, l, kind):
    if trace.layers[l].kind != kind:
        raise TypeError(f"layer {l} is {trace.layers[l].kind}, expected {kind}")


def exact_fim_dense(trace, l):
    _check_kind(trace, l, "dense")
    a, g = trace.acts[l], trace.grads[l]
    n = a.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    # rows are vec(g a^T) = a (x) g
    v = (a[:, :, None] * g[:, None, :]).reshape(n, -1)
    return ExactFisherBlock(l, v.T @ v / n, n, a, g)


def _conv_vecs(trace, l):
    a, u = trace.acts[l], trace.grads[l]  # (N, F, o), (N, C, o)
    n = a.shape[0]
    # vec(DS Ahat^T) = sum over locations of a_loc (x) u_loc
    return np.einsum("nfl,ncl->nfc", a, u).reshape(n, -1)


def exact_fim_conv(trace, l):
    _check_kind(trace, l, "conv")
    v = _conv_vecs(trace, l)
    n = v.shape[0]
    return ExactFisherBlock(l, v.T @ v / n, n)


def exact_fim(trace, l):
    if trace.layers[l].kind == "dense":
        return exact_fim_dense(trace, l)
    return exact_fim_conv(trace, l)


def sum_kron_fim_conv(trace, l):
    """``sum_i E[a_i a_i^T (x) u_i u_i^T]`` over spatial locations ``i``.

    Equals the exact conv block when products at different locations are
    uncorrelated (cross-location terms vanish).
    """
    _check_kind(trace, l, "conv")
    a, u = trace.acts[l], trace.grads[l]
    n = a.shape[0]
    w = np.einsum("nfl,ncl->nlfc", a, u).reshape(-1, a.shape[1] * u.shape[1])
    return w.T @ w / n


def tkfac_factors_dense(trace, l):
    _check_kind(trace, l, "dense")
    a, g = trace.acts[l], trace.grads[l]
    n = a.shape[0]
    tr_lam = np.einsum("ni,ni->n", a, a)
    tr_gam = np.einsum("ni,ni->n", g, g)
    delta = float(np.mean(tr_lam * tr_gam))
    if delta < DEGENERATE_DELTA:
        raise DegenerateBlock(f"layer {l}: delta={delta:.3g}")
    phi = (a * tr_gam[:, None]).T @ a / (n * delta)
    psi = (g * tr_lam[:, None]).T @ g / (n * delta)
    return FisherFactors(delta, phi, psi)


def tkfac_factors_conv(trace, l, mode="location-ratio"):
    """TKFAC factors of a conv layer from the sum-of-Kroneckers form.

    ``delta = sum_i E[tr(a_i a_i^T) tr(u_i u_i^T)]`` over locations ``i``.

    ``mode="location-ratio"`` sums the per-location ratios
    ``E[tr(u_i u_i^T) a_i a_i^T] / E[tr(a_i a_i^T) tr(u_i u_i^T)]`` and rescales
    the sum to unit trace; locations whose denominator vanishes are skipped.
    ``mode="pooled"`` divides the pooled sums by ``delta`` instead, which makes
    the partial traces of ``delta Phi (x) Psi`` match the sum-of-Kroneckers block.
    Both agree when there is a single location.
    """
    _check_kind(trace, l, "conv")
    a, u = trace.acts[l], trace.grads[l]
    n = a.shape[0]
    tr_a = np.einsum("nfl,nfl->nl", a, a)  # (N, o)
    tr_u = np.einsum("ncl,ncl->nl", u, u)
    per_loc = np.mean(tr_a * tr_u, axis=0)  # (o,)
    delta = float(per_loc.sum())
    if delta < DEGENERATE_DELTA:
        raise DegenerateBlock(f"layer {l}: delta={delta:.3g}")
    if mode == "pooled":
        phi = np.einsum("nl,nfl,ngl->fg", tr_u, a, a) / (n * delta)
        psi = np.einsum("nl,ncl,ndl->cd", tr_a, u, u) / (n * delta)
    elif mode == "location-ratio":
        keep = per_loc >= DEGENERATE_DELTA
        weight = np.zeros_like(per_loc)
        weight[keep] = 1.0 / per_loc[keep]
        phi = np.einsum("l,nl,nfl,ngl->fg", weight, tr_u, a, a) / n
        psi = np.einsum("l,nl,ncl,ndl->cd", weight, tr_a, u, u) / n
        phi /= np.trace(phi)
        psi /= np.trace(psi)
    else:
        raise ValueError(f"unknown conv factor mode {mode!r}")
    return FisherFactors(delta, phi, psi)


def tkfac_factors(trace, l, conv_mode="location-ratio"):
    if trace.layers[l].kind == "dense":
        return tkfac_factors_dense(trace, l)
    return tkfac_factors_conv(trace, l, conv_mode)


def kfac_factors(trace, l):
    """KFAC factors ``(A, G)`` with ``F_KFAC = A (x) G``.

    Dense: ``A = E[a a^T]``, ``G = E[g g^T]``.  Conv: ``A`` sums the patch
    second moments over locations, ``G`` averages the output-gradient second
    moments over locations.
    """
    a, g = trace.acts[l], trace.grads[l]
    n = a.shape[0]
    if trace.layers[l].kind == "dense":
        return a.T @ a / n, g.T @ g / n
    o = a.shape[2]
    big_a = np.einsum("nfl,ngl->fg", a, a) / n
    big_g = np.einsum("ncl,ndl->cd", g, g) / (n * o)
    return big_a, big_g
