import numpy as np
import pytest

from tkfac import net as N
from tkfac.net import Network, backward, build_network, forward, im2col, col2im, loss_value
from oracles import conv_loops, dense_forward_loops
from conftest import random_trace


def finite_diff(net, x, y, h=1e-6):
    out = []
    for w in net.weights:
        num = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            old = w[idx]
            w[idx] = old + h
            up = loss_value(net, x, y)
            w[idx] = old - h
            down = loss_value(net, x, y)
            w[idx] = old
            num[idx] = (up - down) / (2 * h)
        out.append(num)
    return out


def test_identity_network_passes_input_through(rng):
    layers = [N.dense(4, 4, "identity"), N.dense(4, 4, "identity")]
    net = Network(layers, [np.eye(4), np.eye(4)])
    x = rng.standard_normal((3, 4))
    out, _ = forward(net, x)
    np.testing.assert_array_equal(out, x)


def test_single_dense_layer_by_hand():
    net = Network([N.dense(2, 2, "identity")], [np.array([[1.0, 2.0], [3.0, 4.0]])])
    out, cache = forward(net, np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(cache.pre[0], [[3.0, 7.0]])
    np.testing.assert_array_equal(out, [[3.0, 7.0]])


@pytest.mark.parametrize("act", ["relu", "sigmoid"])
def test_forward_matches_straight_line_version(rng, act):
    net = build_network("5-4-3", hidden_activation=act, rng=rng)
    x = rng.standard_normal((4, 5))
    out, _ = forward(net, x)
    ref = [dense_forward_loops([w.tolist() for w in net.weights], [act, "identity"], xi)
           for xi in x]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


def test_forward_shape_mismatch():
    net = build_network("5-3", rng=0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((2, 4)))


def test_build_network_parses_conv_arch():
    net = build_network("1x14x14-c4k3p1-c8k3s2p1-10", rng=0)
    kinds = [s.kind for s in net.layers]
    assert kinds == ["conv", "conv", "dense"]
    assert net.layers[1].out_hw == (7, 7)
    assert net.layers[1].weight_shape == (8, 4 * 9)
    assert net.layers[2].in_width == 8 * 49
    with pytest.raises(ValueError):
        build_network("10-c4k3-2")
    with pytest.raises(ValueError):
        build_network("10-abc")


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        N.conv(1, 2, 5, (3, 3))
    with pytest.raises(ValueError):
        N.dense(0, 3)
    assert N.dense(3, 2, bias_mode="homogeneous").weight_shape == (2, 4)


def test_im2col_one_by_one_kernel_is_reshape(rng):
    a = rng.standard_normal((1, 3, 4))
    np.testing.assert_array_equal(im2col(a, 1), a.reshape(1, 12))


def test_im2col_hand_patches():
    a = np.arange(9.0).reshape(1, 3, 3)
    cols = im2col(a, 2)
    expected = np.array([[0, 1, 3, 4], [1, 2, 4, 5], [3, 4, 6, 7], [4, 5, 7, 8]], float).T
    np.testing.assert_array_equal(cols, expected)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2), (3, 0)])
def test_conv_as_matmul_matches_sliding_window(rng, stride, padding):
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    cols = im2col(x, 3, stride, padding)
    got = w.reshape(3, -1) @ cols
    ref = conv_loops(x, w, stride, padding)
    np.testing.assert_allclose(got, ref.reshape(3, -1), rtol=1e-12, atol=1e-12)


def test_im2col_invalid_geometry():
    with pytest.raises(ValueError):
        im2col(np.zeros((1, 2, 2)), 3)


def test_col2im_is_adjoint(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    cols = im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * col2im(y, x.shape, 3, 2, 1))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_gradient_at_origin_closed_form():
    net = build_network("3-4-2", hidden_activation="sigmoid", loss="binary-cross-entropy", rng=0)
    net.weights = [np.zeros_like(w) for w in net.weights]
    x = np.zeros((2, 3))
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    _, cache = forward(net, x)
    tr = backward(net, cache, t)
    # logits are 0, so dL/ds = 0.5 - t; the hidden activations are sigmoid(0) = 0.5
    expected = (0.5 - t).T @ np.full((2, 4), 0.5) / 2
    np.testing.assert_allclose(tr.mean_grads[1], expected, atol=1e-15)
    np.testing.assert_array_equal(tr.mean_grads[0], np.zeros((4, 3)))
    assert all(np.all(np.isfinite(g)) for g in tr.grads)


@pytest.mark.parametrize("arch,loss", [
    ("4-5-3", "softmax-cross-entropy"),
    ("4-5-6", "binary-cross-entropy"),
    ("1x5x5-c2k3p1-c2k2s2-3", "softmax-cross-entropy"),
    ("2x4x4-c3k2-4", "binary-cross-entropy"),
])
def test_gradients_match_finite_differences(rng, arch, loss):
    net, x, tr = random_trace(rng, arch, 3, loss=loss, label_mode="data")
    num = finite_diff(net, x, tr.targets)
    for got, ref in zip(tr.mean_grads, num):
        assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


def test_homogeneous_bias_gradients(rng):
    net, x, tr = random_trace(rng, "4-3-2", 3, label_mode="data", bias_mode="homogeneous")
    num = finite_diff(net, x, tr.targets)
    for got, ref in zip(tr.mean_grads, num):
        assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


@pytest.mark.parametrize("arch", ["4-5-3", "1x5x5-c2k3p1-3"])
def test_per_sample_gradients_average_to_mean(rng, arch):
    _, _, tr = random_trace(rng, arch, 6)
    for l in range(len(tr.layers)):
        avg = np.mean([tr.sample_grad(l, i) for i in range(6)], axis=0)
        np.testing.assert_allclose(avg, tr.mean_grads[l], rtol=1e-12, atol=1e-15)


def test_single_sample_dense_layer_gradient_is_outer_product(rng):
    _, _, tr = random_trace(rng, "3-2", 1, label_mode="data")
    np.testing.assert_array_equal(tr.mean_grads[0], np.outer(tr.grads[0][0], tr.acts[0][0]))


def test_conv_one_location_equals_dense(rng):
    w = rng.standard_normal((3, 4))
    cnet = Network([N.conv(4, 3, 1, (1, 1), activation="identity")], [w])
    dnet = Network([N.dense(4, 3, "identity")], [w.copy()])
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    cout, ccache = forward(cnet, x.reshape(5, 4, 1, 1))
    dout, dcache = forward(dnet, x)
    # same arithmetic up to summation order inside the matrix products
    np.testing.assert_allclose(cout, dout, rtol=1e-14, atol=1e-15)
    ctr, dtr = backward(cnet, ccache, y), backward(dnet, dcache, y)
    np.testing.assert_allclose(ctr.mean_grads[0], dtr.mean_grads[0], rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(ctr.grads[0][:, :, 0], dtr.grads[0], rtol=1e-14, atol=1e-15)


def test_sample_labels_degenerate_and_uniform():
    rng = np.random.default_rng(0)
    assert np.all(N.sample_labels(np.tile([1e9, 0.0, 0.0], (100, 1)), rng) == 0)
    draws = N.sample_labels(np.zeros((100_000, 10)), rng)
    freq = np.bincount(draws, minlength=10) / draws.size
    np.testing.assert_allclose(freq, 0.1, atol=0.01)


def test_sample_labels_bernoulli_and_determinism():
    logits = np.zeros((20_000, 3))
    logits[:, 0] = 50.0
    logits[:, 2] = -50.0
    s = N.sample_labels(logits, np.random.default_rng(1), "binary-cross-entropy")
    assert s[:, 0].all() and not s[:, 2].any()
    np.testing.assert_allclose(s[:, 1].mean(), 0.5, atol=0.02)
    a = N.sample_labels(np.zeros((50, 4)), np.random.default_rng(7))
    b = N.sample_labels(np.zeros((50, 4)), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_backward_needs_rng_or_targets(rng):
    net = build_network("3-2", rng=0)
    _, cache = forward(net, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        backward(net, cache, label_mode="model-sample")
    with pytest.raises(ValueError):
        backward(net, cache)
