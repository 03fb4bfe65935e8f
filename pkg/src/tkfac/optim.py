"""TKFAC training: damping, moving averages, inverse caching and the update loop.

The update for a layer with weight gradient ``G`` (shape ``out x in``) is the
matrix form of ``(Phi_hat^{-1} (x) Psi_hat^{-1}) vec(G)``::

    zeta = -alpha * Psi_hat^{-1} G Phi_hat^{-1}
    m    = tau * m + zeta
    W    = W + m

Factors are refreshed when ``t % T_FIM == 0`` and inverted when
``t % T_INV == 0``.
"""
from dataclasses import dataclass, field
import math
import time

import numpy as np
from scipy.special import expit

from . import fisher
from .kron import sym_inverse
from .net import backward, forward, per_sample_loss

NORMAL = "normal"
NEW_CONV = "new-conv"


class StaleInverse(RuntimeError):
    """Cached inverses are older than the inverse refresh interval."""


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN or infinite loss."""


@dataclass(frozen=True)
class DampingPolicy:
    """``mode="normal"`` adds ``sqrt(lam) I`` to each scaled factor; ``"new-conv"``
    clamps conv trace coefficients at ``nu`` and damps by the layer's own trace.

    ``fc_damping`` picks how dense layers are damped in new-conv mode after the
    beta expansion: ``"trace"`` uses the conv formula (no ``lam`` needed),
    ``"lambda"`` uses the normal formula with ``lam``.
    """

    mode: str = NORMAL
    lam: float = 0.03
    nu: float = 1.0
    fc_damping: str = "trace"

    def __post_init__(self):
        if self.mode not in (NORMAL, NEW_CONV):
            raise ValueError(f"unknown damping mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.nu <= 0:
            raise ValueError("nu must be > 0")
        if self.fc_damping not in ("trace", "lambda"):
            raise ValueError(f"unknown fc_damping {self.fc_damping!r}")


def damp_normal(f, lam):
    """``(sqrt(delta) Phi + sqrt(lam) I, sqrt(delta) Psi + sqrt(lam) I)``."""
    sd, sl = math.sqrt(f.delta), math.sqrt(lam)
    phi = sd * f.phi + sl * np.eye(f.phi.shape[0])
    psi = sd * f.psi + sl * np.eye(f.psi.shape[0])
    return phi, psi


def damp_new_conv(f, nu, layer=None):
    """Trace-scaled damping with the coefficient clamped from below at ``nu``.

    Returns ``(Phi_tilde, Psi_tilde, delta_tilde)`` with ``delta_tilde =
    max(nu, delta)``, ``Phi_tilde = sqrt(delta_tilde) Phi + delta_tilde/d_in I``
    and ``Psi_tilde = sqrt(delta_tilde) Psi + delta_tilde/d_out I``.  ``d_in`` and
    ``d_out`` are the factor sizes (``n_{l-1} k^2`` and ``n_l`` for a conv layer).
    """
    if layer is not None and layer.weight_shape != (f.psi.shape[0], f.phi.shape[0]):
        raise ValueError("factor sizes do not match the layer")
    dt = max(nu, f.delta)
    d_in, d_out = f.phi.shape[0], f.psi.shape[0]
    phi = math.sqrt(dt) * f.phi + (dt / d_in) * np.eye(d_in)
    psi = math.sqrt(dt) * f.psi + (dt / d_out) * np.eye(d_out)
    return phi, psi, dt


def fc_beta_expansion(deltas, deltas_tilde):
    """``beta = max_l delta_tilde_l / delta_l``; layers with ``delta_l == 0`` are skipped."""
    ratios = [dt / d for d, dt in zip(deltas, deltas_tilde) if d > 0]
    if not ratios:
        raise fisher.DegenerateBlock("every layer has delta == 0")
    return max(1.0, max(ratios))


@dataclass
class DampedFactors:
    """Damped (and averaged) factors of one layer with their cached inverses."""

    phi: np.ndarray
    psi: np.ndarray
    phi_inv: np.ndarray = None
    psi_inv: np.ndarray = None
    factor_step: int = -1
    inverse_step: int = -1

    def invert(self, step):
        self.phi_inv = sym_inverse(self.phi)
        self.psi_inv = sym_inverse(self.psi)
        self.inverse_step = step


def ema_update(old, fresh, eps):
    """Blend ``eps * old + (1 - eps) * fresh``; cached inverses are carried over untouched."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must satisfy 0 <= eps < 1")
    phi, psi = fresh
    if old is None:
        return DampedFactors(np.array(phi, dtype=float), np.array(psi, dtype=float))
    return DampedFactors(eps * old.phi + (1.0 - eps) * phi,
                         eps * old.psi + (1.0 - eps) * psi,
                         old.phi_inv, old.psi_inv, old.factor_step, old.inverse_step)


@dataclass
class TrainState:
    alpha: float = 0.03
    tau: float = 0.9
    eps: float = 0.95
    t_fim: int = 100
    t_inv: int = 100
    iteration: int = 0
    momentum: list = None
    seed: int = 0


def precondition(damped, grad):
    """``Psi_hat^{-1} G Phi_hat^{-1}``."""
    return damped.psi_inv @ grad @ damped.phi_inv


def momentum_update(state, net, directions, alpha=None):
    """``m = tau m - alpha d;  W = W + m`` for every layer."""
    alpha = state.alpha if alpha is None else alpha
    if state.momentum is None:
        state.momentum = [np.zeros_like(w) for w in net.weights]
    for l, d in enumerate(directions):
        state.momentum[l] = state.tau * state.momentum[l] - alpha * d
        net.weights[l] = net.weights[l] + state.momentum[l]


def natural_gradient_step(state, net, damped, grads, alpha=None):
    """Precondition every layer gradient with cached inverses and apply the momentum update."""
    for l, d in enumerate(damped):
        if d.phi_inv is None or state.iteration - d.inverse_step >= state.t_inv:
            raise StaleInverse(f"layer {l}: inverse from step {d.inverse_step}, now"
                               f" {state.iteration}, T_INV={state.t_inv}")
    momentum_update(state, net, [precondition(d, g) for d, g in zip(damped, grads)], alpha)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """Common interface used by :func:`run_training`."""

    name = "base"
    uses_fisher = False

    def __init__(self, alpha, tau=0.9):
        self.state = TrainState(alpha=alpha, tau=tau)

    def needs_fisher(self, t):
        return False

    def step(self, net, trace, fisher_trace=None, alpha=None):
        raise NotImplementedError

    def diagnostics(self):
        return {}


class SGDM(Optimizer):
    """Momentum SGD: ``m = tau m - alpha g;  W = W + m``."""

    name = "sgdm"

    def step(self, net, trace, fisher_trace=None, alpha=None):
        momentum_update(self.state, net, trace.mean_grads, alpha)
        self.state.iteration += 1


class Adam(Optimizer):
    """Adam with bias correction; ``eps`` is the denominator offset."""

    name = "adam"

    def __init__(self, alpha, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(alpha, tau=0.0)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None

    def update(self, grads, alpha=None):
        alpha = self.state.alpha if alpha is None else alpha
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        t = self.state.iteration + 1
        steps = []
        for l, g in enumerate(grads):
            self.m[l] = self.beta1 * self.m[l] + (1 - self.beta1) * g
            self.v[l] = self.beta2 * self.v[l] + (1 - self.beta2) * g * g
            mhat = self.m[l] / (1 - self.beta1 ** t)
            vhat = self.v[l] / (1 - self.beta2 ** t)
            steps.append(-alpha * mhat / (np.sqrt(vhat) + self.eps))
        self.state.iteration += 1
        return steps

    def step(self, net, trace, fisher_trace=None, alpha=None):
        for l, s in enumerate(self.update(trace.mean_grads, alpha)):
            net.weights[l] = net.weights[l] + s


class _Preconditioned(Optimizer):
    uses_fisher = True

    def __init__(self, alpha, lam=0.03, tau=0.9, eps=0.95, t_fim=100, t_inv=100):
        super().__init__(alpha, tau)
        self.state.eps, self.state.t_fim, self.state.t_inv = eps, t_fim, t_inv
        self.lam = lam
        self.damped = None
        self.factor_refreshes = 0
        self.inverse_refreshes = 0
        self.history = []

    def needs_fisher(self, t):
        return t % self.state.t_fim == 0

    def refresh(self, net, fisher_trace):
        raise NotImplementedError

    def step(self, net, trace, fisher_trace=None, alpha=None):
        t = self.state.iteration
        if t % self.state.t_fim == 0:
            if fisher_trace is None:
                raise ValueError(f"step {t} needs a Fisher trace")
            self.refresh(net, fisher_trace)
            for d in self.damped:
                d.factor_step = t
            self.factor_refreshes += 1
        if t % self.state.t_inv == 0:
            for d in self.damped:
                d.invert(t)
            self.inverse_refreshes += 1
        natural_gradient_step(self.state, net, self.damped, trace.mean_grads, alpha)
        self.state.iteration += 1


def _unit_factors(spec):
    return fisher.FisherFactors(0.0, np.eye(spec.fan_in) / spec.fan_in,
                                np.eye(spec.fan_out) / spec.fan_out)


class TKFAC(_Preconditioned):
    """Trace-restricted Kronecker-factored natural gradient.

    ``ema="damped"`` averages the damped factors; ``ema="raw"`` averages
    ``(delta, Phi, Psi)`` and damps afterwards.
    """

    name = "tkfac"

    def __init__(self, alpha, damping=None, tau=0.9, eps=0.95, t_fim=100, t_inv=100,
                 ema="damped", conv_mode="location-ratio"):
        damping = damping or DampingPolicy()
        super().__init__(alpha, damping.lam, tau, eps, t_fim, t_inv)
        if ema not in ("damped", "raw"):
            raise ValueError(f"unknown ema placement {ema!r}")
        self.damping = damping
        self.ema = ema
        self.conv_mode = conv_mode
        self.raw = None
        self.last = {}

    def _factors(self, net, fisher_trace):
        out = []
        for l, spec in enumerate(net.layers):
            try:
                out.append(fisher.tkfac_factors(fisher_trace, l, self.conv_mode))
            except fisher.DegenerateBlock:
                out.append(_unit_factors(spec))
        return out

    def _damp(self, net, factors):
        pol = self.damping
        deltas = [f.delta for f in factors]
        record = {"delta": deltas}
        if pol.mode == NORMAL:
            fresh = [damp_normal(f, pol.lam) for f in factors]
            added = [math.sqrt(pol.lam)] * len(factors)
            scales = [math.sqrt(d) for d in deltas]
        else:
            deltas_tilde = [max(pol.nu, d) for d in deltas]
            beta = fc_beta_expansion(deltas, deltas_tilde) if any(d > 0 for d in deltas) else 1.0
            fresh, added, scales, used = [], [], [], []
            for spec, f in zip(net.layers, factors):
                if spec.kind == "conv":
                    phi, psi, dt = damp_new_conv(f, pol.nu, spec)
                    fresh.append((phi, psi))
                    added.append((dt / f.phi.shape[0], dt / f.psi.shape[0]))
                    scales.append(math.sqrt(dt))
                    used.append(dt)
                    continue
                d_fc = max(pol.nu, beta * f.delta)
                g = fisher.FisherFactors(d_fc, f.phi, f.psi)
                if pol.fc_damping == "trace":
                    phi, psi, _ = damp_new_conv(g, pol.nu)
                    added.append((d_fc / f.phi.shape[0], d_fc / f.psi.shape[0]))
                else:
                    phi, psi = damp_normal(g, pol.lam)
                    added.append(math.sqrt(pol.lam))
                fresh.append((phi, psi))
                scales.append(math.sqrt(d_fc))
                used.append(d_fc)
            record.update(delta_tilde=deltas_tilde, beta=beta, delta_used=used)
        record["damping_ratio"] = _damping_ratios(factors, added, scales)
        return fresh, record

    def refresh(self, net, fisher_trace):
        factors = self._factors(net, fisher_trace)
        eps = self.state.eps
        if self.ema == "raw":
            if self.raw is None:
                self.raw = factors
            else:
                self.raw = [fisher.FisherFactors(eps * o.delta + (1 - eps) * f.delta,
                                                 eps * o.phi + (1 - eps) * f.phi,
                                                 eps * o.psi + (1 - eps) * f.psi)
                            for o, f in zip(self.raw, factors)]
            fresh, record = self._damp(net, self.raw)
            self.damped = [ema_update(None, fr, 0.0) if old is None else
                           DampedFactors(fr[0], fr[1], old.phi_inv, old.psi_inv,
                                         old.factor_step, old.inverse_step)
                           for old, fr in zip(self.damped or [None] * len(fresh), fresh)]
        else:
            fresh, record = self._damp(net, factors)
            if self.damped is None:
                self.damped = [ema_update(None, fr, eps) for fr in fresh]
            else:
                self.damped = [ema_update(old, fr, eps) for old, fr in zip(self.damped, fresh)]
        record["iteration"] = self.state.iteration
        record["min_eig"] = [min(np.linalg.eigvalsh(d.phi)[0], np.linalg.eigvalsh(d.psi)[0])
                             for d in self.damped]
        self.history.append(record)
        self.last = record

    def diagnostics(self):
        out = {}
        if not self.last:
            return out
        for l, d in enumerate(self.last["delta"]):
            out[f"delta_{l}"] = d
        for l, r in enumerate(self.last["damping_ratio"]):
            out[f"damp_ratio_phi_{l}"], out[f"damp_ratio_psi_{l}"] = r
        if "beta" in self.last:
            out["beta"] = self.last["beta"]
        return out


def _damping_ratios(factors, added, scales):
    """Added diagonal over the mean diagonal of ``scale * Phi`` and ``scale * Psi``."""
    out = []
    for f, add, s in zip(factors, added, scales):
        add_phi, add_psi = add if isinstance(add, tuple) else (add, add)
        mean_phi = s * np.trace(f.phi) / f.phi.shape[0]
        mean_psi = s * np.trace(f.psi) / f.psi.shape[0]
        out.append((add_phi / mean_phi if mean_phi > 0 else math.inf,
                    add_psi / mean_psi if mean_psi > 0 else math.inf))
    return out


class KFAC(_Preconditioned):
    """KFAC baseline: moving averages of ``E[a a^T]`` and ``E[g g^T]``, each damped
    by ``sqrt(lam) I`` before inversion."""

    name = "kfac"

    def __init__(self, alpha, lam=0.03, tau=0.9, eps=0.95, t_fim=100, t_inv=100):
        super().__init__(alpha, lam, tau, eps, t_fim, t_inv)
        self.stats = None

    def refresh(self, net, fisher_trace):
        fresh = [fisher.kfac_factors(fisher_trace, l) for l in range(len(net.layers))]
        eps = self.state.eps
        if self.stats is None:
            self.stats = fresh
        else:
            self.stats = [(eps * a0 + (1 - eps) * a, eps * g0 + (1 - eps) * g)
                          for (a0, g0), (a, g) in zip(self.stats, fresh)]
        sl = math.sqrt(self.lam)
        old = self.damped or [None] * len(fresh)
        self.damped = [DampedFactors(a + sl * np.eye(a.shape[0]), g + sl * np.eye(g.shape[0]),
                                     *((o.phi_inv, o.psi_inv, o.factor_step, o.inverse_step)
                                       if o is not None else ()))
                       for (a, g), o in zip(self.stats, old)]
        self.history.append({"iteration": self.state.iteration})


def make_optimizer(name, alpha, lam=0.03, nu=1.0, tau=0.9, eps=0.95, t_fim=100, t_inv=100,
                   ema="damped", fc_damping="trace"):
    if name == "tkfac_nor":
        return TKFAC(alpha, DampingPolicy(NORMAL, lam, nu), tau, eps, t_fim, t_inv, ema)
    if name == "tkfac_new":
        return TKFAC(alpha, DampingPolicy(NEW_CONV, lam, nu, fc_damping), tau, eps,
                     t_fim, t_inv, ema)
    if name == "kfac":
        return KFAC(alpha, lam, tau, eps, t_fim, t_inv)
    if name == "sgdm":
        return SGDM(alpha, tau)
    if name == "adam":
        return Adam(alpha, eps=lam)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    lr: float
    batch_loss: float
    train_loss: float
    train_error: float
    test_loss: float = math.nan
    test_error: float = math.nan
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0


def evaluate(net, x, y, chunk=1000):
    """Mean loss and error (classification error rate or per-sample squared
    reconstruction error summed over outputs)."""
    n = x.shape[0]
    loss = err = 0.0
    for i in range(0, n, chunk):
        xb, yb = x[i:i + chunk], y[i:i + chunk]
        out, _ = forward(net, xb)
        loss += float(np.sum(per_sample_loss(net.loss, out, yb)))
        if net.loss == "softmax-cross-entropy":
            err += float(np.sum(np.argmax(out, axis=1) != yb))
        else:
            err += float(np.sum((expit(out) - yb) ** 2))
    return loss / n, err / n


@dataclass
class TrainResult:
    records: list
    net: object
    optimizer: object
    hook_outputs: list


def run_training(net, optimizer, x, y, *, epochs=None, iterations=None, batch_size=500,
                 seed=0, label_mode="model-sample", log_every=None, lr_decay_every=None,
                 lr_decay=0.1, test=None, hooks=(), on_record=None):
    """Mini-batch natural-gradient training loop.

    Mini-batches come from a per-epoch permutation (incomplete trailing batches
    are dropped).  A Fisher trace (``label_mode`` labels) is computed whenever
    the optimizer refreshes factors or a hook fires; hooks are called as
    ``hook(iteration, fisher_trace)``.  Records are emitted every ``log_every``
    iterations (default: once per epoch) plus at the end.  ``lr_decay_every``
    is in epochs.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    per_epoch = max(1, n // batch_size) if batch_size < n else 1
    if iterations is None:
        if epochs is None:
            raise ValueError("give epochs or iterations")
        iterations = epochs * per_epoch
    log_every = log_every or per_epoch
    data_rng, label_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    hook_every = [getattr(h, "every", 1) for h in hooks]

    records, hook_outputs = [], []
    order = None
    step_time = 0.0
    for t in range(iterations):
        epoch, pos = divmod(t, per_epoch)
        if pos == 0:
            order = data_rng.permutation(n) if batch_size < n else np.arange(n)
        idx = order[pos * batch_size:(pos + 1) * batch_size]
        xb, yb = x[idx], y[idx]
        alpha = optimizer.state.alpha
        if lr_decay_every:
            alpha *= lr_decay ** (epoch // lr_decay_every)

        tic = time.perf_counter()
        out, cache = forward(net, xb)
        trace = backward(net, cache, yb, "data")
        if not math.isfinite(trace.loss):
            raise NonFiniteLoss(f"loss is {trace.loss} at iteration {t}")
        want_hook = any(t % e == 0 for e in hook_every)
        fisher_trace = None
        if optimizer.needs_fisher(t) or want_hook:
            if label_mode == "data":
                fisher_trace = trace
            else:
                fisher_trace = backward(net, cache, label_mode="model-sample", rng=label_rng)
        optimizer.step(net, trace, fisher_trace, alpha)
        step_time += time.perf_counter() - tic
        if want_hook:
            for h in hooks:
                res = h(t, fisher_trace)
                if res is not None:
                    hook_outputs.append(res)

        done = t + 1
        if done % log_every == 0 or done == iterations:
            tr_loss, tr_err = evaluate(net, x, y)
            if not math.isfinite(tr_loss):
                raise NonFiniteLoss(f"training loss is {tr_loss} after iteration {t}")
            rec = MetricsRecord(done, done // per_epoch, alpha, trace.loss, tr_loss, tr_err,
                                extra=optimizer.diagnostics(), wall_time=step_time)
            if test is not None:
                rec.test_loss, rec.test_error = evaluate(net, *test)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return TrainResult(records, net, optimizer, hook_outputs)
