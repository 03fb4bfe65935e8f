"""Approximation-quality diagnostics for factored Fisher blocks."""
from dataclasses import dataclass, asdict
import csv
import math

import numpy as np

from . import fisher
from .kron import kron, frob_norm

DEFAULT_CAP = 4096


class CapExceeded(RuntimeError):
    """An exact Fisher block would be larger than the configured cap."""


def approx_error(exact, factored):
    """Frobenius distance between an exact block and a factored approximation.

    ``factored`` is a :class:`~tkfac.fisher.FisherFactors` or a KFAC pair
    ``(A, G)``; it is materialized densely.
    """
    f = exact.matrix if isinstance(exact, fisher.ExactFisherBlock) else np.asarray(exact)
    if isinstance(factored, fisher.FisherFactors):
        approx = factored.dense()
    else:
        approx = kron(*factored)
    if approx.shape != f.shape:
        raise ValueError(f"approximation shape {approx.shape} != exact shape {f.shape}")
    return frob_norm(f - approx)


def _pair_traces(samples):
    lam = np.array([np.trace(s[0]) for s in samples], dtype=np.float64)
    gam = np.array([np.trace(s[1]) for s in samples], dtype=np.float64)
    return lam, gam


def _pair_max(values):
    n = values.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    return float(np.max(values[iu]))


def tkfac_bound_from_traces(lam, gam):
    lam, gam = np.asarray(lam, float), np.asarray(gam, float)
    n = lam.size
    if n < 2:
        return 0.0
    prod = np.sqrt(np.outer(lam, lam) * np.outer(gam, gam))
    return 2.0 * (n - 1) / n * _pair_max(prod)


def kfac_bound_from_traces(lam, gam):
    lam, gam = np.asarray(lam, float), np.asarray(gam, float)
    n = lam.size
    if n < 2:
        return 0.0
    prod = (lam[:, None] + lam[None, :]) * (gam[:, None] + gam[None, :]) / 4.0
    return 2.0 * (n - 1) / n * _pair_max(prod)


def tkfac_bound(samples):
    """Upper bound on ``||F - F_TKFAC||_F`` for per-sample pairs ``(Lambda_i, Gamma_i)``.

    ``2 (N-1)/N * max_{i<j} sqrt(tr L_i tr L_j tr G_i tr G_j)``; zero for ``N = 1``.
    """
    return tkfac_bound_from_traces(*_pair_traces(samples))


def kfac_bound(samples):
    """KFAC analogue: ``2 (N-1)/N * max_{i<j} (tr L_i + tr L_j)(tr G_i + tr G_j) / 4``."""
    return kfac_bound_from_traces(*_pair_traces(samples))


@dataclass
class LayerError:
    iteration: int
    layer: int
    dim: int
    tkfac_error: float
    kfac_error: float
    tkfac_bound: float
    kfac_bound: float
    trace_exact: float
    trace_tkfac: float


@dataclass
class ErrorReport:
    iteration: int
    layers: list

    @property
    def tkfac_total(self):
        return sum(e.tkfac_error for e in self.layers)

    @property
    def kfac_total(self):
        return sum(e.kfac_error for e in self.layers)


def error_report(trace, iteration=0, cap=DEFAULT_CAP, conv_mode="location-ratio"):
    """Exact blocks, both factorizations, both errors and (dense) both bounds for every layer."""
    for l, spec in enumerate(trace.layers):
        dim = spec.fan_in * spec.fan_out
        if dim > cap:
            raise CapExceeded(f"layer {l} block is {dim}x{dim}, cap is {cap}")
    rows = []
    for l, spec in enumerate(trace.layers):
        exact = fisher.exact_fim(trace, l)
        try:
            tk = fisher.tkfac_factors(trace, l, conv_mode)
            tk_err = approx_error(exact, tk)
            tr_tk = tk.delta
        except fisher.DegenerateBlock:
            tk_err, tr_tk = frob_norm(exact.matrix), 0.0
        kf_err = approx_error(exact, fisher.kfac_factors(trace, l))
        if spec.kind == "dense":
            lam, gam = exact.lambda_traces, exact.gamma_traces
            tb, kb = tkfac_bound_from_traces(lam, gam), kfac_bound_from_traces(lam, gam)
        else:
            tb = kb = math.nan
        rows.append(LayerError(iteration, l, exact.dim, tk_err, kf_err, tb, kb,
                               float(np.trace(exact.matrix)), tr_tk))
    return ErrorReport(iteration, rows)


ERROR_FIELDS = list(LayerError.__dataclass_fields__)


def write_error_csv(reports, path):
    with open(path, "w", newline="") as fh:
        fh.write("# tkfac error-report v1\n")
        writer = csv.DictWriter(fh, fieldnames=ERROR_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            for row in rep.layers:
                writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                                 for k, v in asdict(row).items()})


class ErrorCurve:
    """Training hook that records an :class:`ErrorReport` every ``every`` iterations.

    The reports are computed on the Fisher batch the optimizer draws (model-
    sampled labels), so errors and bounds come from the same data.
    """

    def __init__(self, every=100, cap=DEFAULT_CAP, conv_mode="location-ratio", path=None):
        self.every = every
        self.cap = cap
        self.conv_mode = conv_mode
        self.path = path
        self.reports = []

    def __call__(self, iteration, fisher_trace):
        if iteration % self.every:
            return None
        rep = error_report(fisher_trace, iteration, self.cap, self.conv_mode)
        self.reports.append(rep)
        if self.path is not None:
            write_error_csv(self.reports, self.path)
        return rep


def error_curve(every=100, cap=DEFAULT_CAP, **kwargs):
    return ErrorCurve(every, cap, **kwargs)


def location_correlation(trace, l):
    """Absolute Pearson correlation between per-location products across the batch.

    For each sample and location the product ``vec(a_i u_i^T)`` is flattened;
    the correlation between locations ``i`` and ``j`` is the Pearson
    correlation of the concatenated (over batch and entries) centered
    products.  Returns ``(corr, degenerate)`` where ``degenerate`` flags
    zero-variance locations, whose correlations are reported as 0.
    """
    if trace.layers[l].kind != "conv":
        raise TypeError(f"layer {l} is not a conv layer")
    a, u = trace.acts[l], trace.grads[l]
    prods = np.einsum("nfl,ncl->lnfc", a, u)
    o = prods.shape[0]
    # center each entry over the batch
    x = (prods - prods.mean(axis=1, keepdims=True)).reshape(o, -1)
    norms = np.linalg.norm(x, axis=1)
    degenerate = norms <= 1e-300
    safe = np.where(degenerate, 1.0, norms)
    corr = np.abs(x @ x.T) / np.outer(safe, safe)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    idx = np.flatnonzero(~degenerate)
    corr[idx, idx] = 1.0
    return corr, degenerate
