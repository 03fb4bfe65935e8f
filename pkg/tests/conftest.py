import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tkfac.net import backward, build_network, forward  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_trace(rng, arch, n, loss="softmax-cross-entropy", activation="sigmoid",
                 label_mode="model-sample", bias_mode="none"):
    """Build a random net, run a batch and return ``(net, x, trace)``."""
    net = build_network(arch, hidden_activation=activation, loss=loss,
                        bias_mode=bias_mode, rng=rng)
    x = rng.standard_normal((n, net.input_size))
    first = net.layers[0]
    if first.kind == "conv":
        x = x.reshape(n, first.in_channels, *first.in_hw)
    _, cache = forward(net, x)
    targets = None
    if label_mode == "data":
        out_dim = net.layers[-1].output_size
        if loss == "softmax-cross-entropy":
            targets = rng.integers(0, out_dim, size=n)
        else:
            targets = (rng.random((n, out_dim)) < 0.5).astype(float)
    trace = backward(net, cache, targets, label_mode=label_mode, rng=rng)
    return net, x, trace


def pytest_terminal_summary(terminalreporter):
    results = {}
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            results.update(mod.RESULTS)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
