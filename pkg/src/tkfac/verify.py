"""Quick self-checks of the core identities (used by ``tkfac verify``)."""
import numpy as np

from . import analysis, fisher, kron
from .net import backward, build_network, forward, loss_value


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _random_trace(rng, arch, n, loss="softmax-cross-entropy"):
    net = build_network(arch, hidden_activation="sigmoid", loss=loss, rng=rng)
    x = rng.standard_normal((n, net.input_size))
    if net.layers[0].kind == "conv":
        spec = net.layers[0]
        x = x.reshape(n, spec.in_channels, *spec.in_hw)
    _, cache = forward(net, x)
    return net, x, backward(net, cache, label_mode="model-sample", rng=rng)


def check_kronecker(rng, trials=200):
    worst = 0.0
    for _ in range(trials):
        m, n, p, q = rng.integers(1, 5, size=4)
        a, b = rng.standard_normal((m, n)), rng.standard_normal((p, q))
        c, d = rng.standard_normal((n, 3)), rng.standard_normal((q, 2))
        worst = max(worst, _rel(kron.kron(a, b) @ kron.kron(c, d), kron.kron(a @ c, b @ d)))
        worst = max(worst, _rel(kron.kron(a, b).T, kron.kron(a.T, b.T)))
        big = kron.CommutationMatrix(p, m).conjugate(kron.kron(a, b), kron.CommutationMatrix(n, q))
        worst = max(worst, _rel(big, kron.kron(b, a)))
        worst = max(worst, _rel(kron.commutation_apply(kron.CommutationMatrix(m, n), kron.vec(a)),
                                kron.vec(a.T)))
    return worst <= 1e-10, f"worst rel err {worst:.2e}"


def check_trace_preservation(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        _, _, tr = _random_trace(rng, "5-4-3", int(rng.integers(1, 9)))
        for l in range(2):
            ex = fisher.exact_fim_dense(tr, l)
            f = fisher.tkfac_factors_dense(tr, l)
            worst = max(worst, abs(f.delta * np.trace(f.phi) * np.trace(f.psi)
                                   - np.trace(ex.matrix)) / np.trace(ex.matrix))
            pt = kron.partial_trace(ex.matrix, tr.grads[l].shape[1])
            worst = max(worst, _rel(pt, f.delta * f.phi))
    return worst <= 1e-10, f"worst rel err {worst:.2e}"


def check_error_bound(rng, trials=200):
    violations = 0
    for _ in range(trials):
        _, _, tr = _random_trace(rng, "4-3-2", int(rng.integers(1, 9)))
        ex = fisher.exact_fim_dense(tr, 1)
        err = analysis.approx_error(ex, fisher.tkfac_factors_dense(tr, 1))
        bound = analysis.tkfac_bound(ex.samples())
        violations += err > bound + 1e-12
    return violations == 0, f"{violations} violations in {trials}"


def check_gradients(rng, trials=10):
    worst = 0.0
    for i in range(trials):
        arch = "1x5x5-c2k3p1-c2k2s2-3" if i % 2 else "4-5-3"
        net, x, _ = _random_trace(rng, arch, 3)
        y = rng.integers(0, 3, size=3)
        _, cache = forward(net, x)
        tr = backward(net, cache, y)
        for l, w in enumerate(net.weights):
            num = np.zeros_like(w)
            for idx in np.ndindex(*w.shape):
                old = w[idx]
                w[idx] = old + 1e-6
                up = loss_value(net, x, y)
                w[idx] = old - 1e-6
                down = loss_value(net, x, y)
                w[idx] = old
                num[idx] = (up - down) / 2e-6
            worst = max(worst, _rel(tr.mean_grads[l], num))
    return worst <= 1e-5, f"worst rel err {worst:.2e}"


CHECKS = {
    "kronecker-identities": check_kronecker,
    "trace-preservation": check_trace_preservation,
    "error-bound": check_error_bound,
    "gradient-check": check_gradients,
}


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS.items():
        ok, detail = fn(rng)
        out.append((name, bool(ok), detail))
    return out
