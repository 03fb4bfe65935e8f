"""Small feed-forward networks (dense + conv) with analytic backprop.

Every parametric layer computes ``s = W a`` (dense) or ``S = W im2col(A)``
(conv); biases are either dropped or folded into ``W`` by appending a constant
one to the layer input (``bias_mode="homogeneous"``).  The backward pass keeps
the per-sample layer inputs and pre-activation gradients, which is all the
Fisher estimators need.

Gradients are stored with the sign of ``dL/ds`` (not ``-dL/ds``); Fisher blocks
are outer products so the sign never matters there.
"""
from dataclasses import dataclass, field
import re

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax

ACTIVATIONS = ("relu", "sigmoid", "identity")
LOSSES = ("softmax-cross-entropy", "binary-cross-entropy")


@dataclass(frozen=True)
class LayerSpec:
    """One parametric layer.

    ``kind`` is ``"dense"`` or ``"conv"``.  Dense layers use ``in_width`` and
    ``out_width``; conv layers use channels, kernel, stride, padding and the
    input spatial size.  ``activation`` is applied to the pre-activation.
    """

    kind: str
    in_width: int = 0
    out_width: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_hw: tuple = (1, 1)
    activation: str = "relu"
    bias_mode: str = "none"

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias_mode not in ("none", "homogeneous"):
            raise ValueError(f"unknown bias_mode {self.bias_mode!r}")
        if self.kind == "dense":
            if self.in_width < 1 or self.out_width < 1:
                raise ValueError("dense widths must be >= 1")
        else:
            if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
                raise ValueError("conv dimensions must be >= 1")
            if self.padding < 0:
                raise ValueError("padding must be >= 0")
            if min(self.out_hw) < 1:
                raise ValueError(f"kernel {self.kernel} does not fit input {self.in_hw}"
                                 f" with padding {self.padding}")

    @property
    def homogeneous(self):
        return self.bias_mode == "homogeneous"

    @property
    def out_hw(self):
        h, w = self.in_hw
        k, s, p = self.kernel, self.stride, self.padding
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    @property
    def locations(self):
        """Number of spatial locations ``o`` (1 for dense layers)."""
        if self.kind == "dense":
            return 1
        oh, ow = self.out_hw
        return oh * ow

    @property
    def fan_in(self):
        """Rows of the layer input matrix (``m_{l-1}`` or ``n_{l-1} k^2``), bias included."""
        base = self.in_width if self.kind == "dense" else self.in_channels * self.kernel ** 2
        return base + int(self.homogeneous)

    @property
    def fan_out(self):
        return self.out_width if self.kind == "dense" else self.out_channels

    @property
    def weight_shape(self):
        return (self.fan_out, self.fan_in)

    @property
    def input_size(self):
        if self.kind == "dense":
            return self.in_width
        return self.in_channels * self.in_hw[0] * self.in_hw[1]

    @property
    def output_size(self):
        if self.kind == "dense":
            return self.out_width
        oh, ow = self.out_hw
        return self.out_channels * oh * ow


def dense(in_width, out_width, activation="relu", bias_mode="none"):
    return LayerSpec("dense", in_width=in_width, out_width=out_width,
                     activation=activation, bias_mode=bias_mode)


def conv(in_channels, out_channels, kernel, in_hw, stride=1, padding=0,
         activation="relu", bias_mode="none"):
    return LayerSpec("conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding, in_hw=tuple(in_hw),
                     activation=activation, bias_mode=bias_mode)


@dataclass
class Network:
    layers: list
    weights: list
    loss: str = "softmax-cross-entropy"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if len(self.layers) != len(self.weights):
            raise ValueError("one weight matrix per layer is required")
        for l, (spec, w) in enumerate(zip(self.layers, self.weights)):
            if w.shape != spec.weight_shape:
                raise ValueError(f"layer {l}: weight shape {w.shape} != {spec.weight_shape}")
        for l in range(1, len(self.layers)):
            prev, cur = self.layers[l - 1], self.layers[l]
            if prev.output_size != cur.input_size:
                raise ValueError(f"layer {l}: input size {cur.input_size} does not match"
                                 f" previous output {prev.output_size}")
            if cur.kind == "conv" and prev.kind == "conv" and \
                    (prev.out_channels, prev.out_hw) != (cur.in_channels, cur.in_hw):
                raise ValueError(f"layer {l}: conv geometry does not chain")

    @classmethod
    def init(cls, layers, loss="softmax-cross-entropy", rng=None, scale=None):
        """He-style Gaussian initialization (bias columns start at zero)."""
        rng = np.random.default_rng(rng)
        weights = []
        for spec in layers:
            base = spec.fan_in - int(spec.homogeneous)
            std = np.sqrt(2.0 / base) if scale is None else scale
            w = rng.standard_normal(spec.weight_shape) * std
            if spec.homogeneous:
                w[:, -1] = 0.0
            weights.append(w)
        return cls(list(layers), weights, loss)

    @property
    def input_size(self):
        return self.layers[0].input_size

    def copy(self):
        return Network(list(self.layers), [w.copy() for w in self.weights], self.loss)


_TOKEN = re.compile(r"^c(\d+)k(\d+)(?:s(\d+))?(?:p(\d+))?$")


def build_network(arch, hidden_activation="relu", output_activation="identity",
                  loss="softmax-cross-entropy", bias_mode="none", rng=None):
    """Build a network from an architecture string.

    The first token is the input (``"196"`` or ``"1x14x14"``); later tokens are
    dense widths (``"20"``) or convs (``"c8k3s2p1"``: 8 channels, 3x3 kernel,
    stride 2, padding 1).  Example: ``"1x14x14-c4k3p1-c8k3s2p1-10"``.
    """
    tokens = arch.strip().split("-")
    head = [int(t) for t in tokens[0].split("x")]
    if len(head) == 1:
        shape = (head[0],)
    elif len(head) == 3:
        shape = tuple(head)
    else:
        raise ValueError(f"bad input token {tokens[0]!r}")
    layers = []
    body = tokens[1:]
    if not body:
        raise ValueError("architecture needs at least one layer")
    for i, tok in enumerate(body):
        act = output_activation if i == len(body) - 1 else hidden_activation
        m = _TOKEN.match(tok)
        if m:
            if len(shape) != 3:
                raise ValueError("conv layer must follow an image-shaped input or conv layer")
            n_out, k = int(m.group(1)), int(m.group(2))
            s, p = int(m.group(3) or 1), int(m.group(4) or 0)
            spec = conv(shape[0], n_out, k, shape[1:], stride=s, padding=p,
                        activation=act, bias_mode=bias_mode)
            shape = (n_out,) + spec.out_hw
        elif tok.isdigit():
            width = int(np.prod(shape))
            spec = dense(width, int(tok), activation=act, bias_mode=bias_mode)
            shape = (int(tok),)
        else:
            raise ValueError(f"bad layer token {tok!r}")
        layers.append(spec)
    return Network.init(layers, loss=loss, rng=rng)


# ---------------------------------------------------------------------------
# im2col


def im2col(a, kernel, stride=1, padding=0):
    """Rearrange receptive fields into columns.

    ``a`` has shape ``(C, H, W)`` or a batch ``(N, C, H, W)``.  The result has
    shape ``(C*k*k, o)`` (or ``(N, C*k*k, o)``); rows are ordered
    ``(channel, kernel_row, kernel_col)`` to match a weight tensor of shape
    ``(n_out, C, k, k)`` flattened in C order, and column ``j`` is the patch at
    output location ``j`` in row-major order.
    """
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {a.shape}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("invalid kernel/stride/padding")
    n, c, h, w = a.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(f"kernel {kernel} larger than padded input {(h, w)}")
    if padding:
        a = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(a, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    # (N, C, oh, ow, k, k) -> (N, C, k, k, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, oh * ow)
    return cols[0] if single else cols


def col2im(cols, shape, kernel, stride=1, padding=0):
    """Adjoint of :func:`im2col` for a batch: scatter-add columns back to ``(N, C, H, W)``."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = (hp - kernel) // stride + 1, (wp - kernel) // stride + 1
    cols = cols.reshape(n, c, kernel, kernel, oh, ow)
    out = np.zeros((n, c, hp, wp))
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out[:, :, padding:padding + h, padding:padding + w]


# ---------------------------------------------------------------------------
# forward / backward


def _activate(name, s):
    if name == "relu":
        return np.maximum(s, 0.0)
    if name == "sigmoid":
        return expit(s)
    return s


def _activation_grad(name, s, a):
    if name == "relu":
        return (s > 0).astype(np.float64)  # derivative at 0 is 0
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(s)


def _layer_input(spec, x):
    """Input matrix of a layer: ``(N, fan_in)`` for dense, ``(N, fan_in, o)`` for conv."""
    n = x.shape[0]
    if spec.kind == "dense":
        a = x.reshape(n, -1)
        if spec.homogeneous:
            a = np.concatenate([a, np.ones((n, 1))], axis=1)
        return a
    img = x.reshape(n, spec.in_channels, *spec.in_hw)
    cols = im2col(img, spec.kernel, spec.stride, spec.padding)
    if spec.homogeneous:
        cols = np.concatenate([cols, np.ones((n, 1, cols.shape[2]))], axis=1)
    return cols


@dataclass
class ForwardCache:
    inputs: list  # per layer: dense (N, fan_in); conv (N, fan_in, o)
    pre: list  # per layer pre-activations: dense (N, out); conv (N, n_out, o)
    post: list  # per layer activations, same shape as pre
    output: np.ndarray  # (N, out) final activation flattened


def forward(net, x):
    """Run the network on a batch ``x`` of shape ``(N, input_size)`` or ``(N, C, H, W)``.

    Returns ``(output, cache)``; ``output`` is the flattened last activation
    (logits when the last activation is the identity).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if x[0].size != net.input_size:
        raise ValueError(f"input has {x[0].size} features, network expects {net.input_size}")
    inputs, pre, post = [], [], []
    h = x
    for spec, w in zip(net.layers, net.weights):
        a = _layer_input(spec, h)
        if spec.kind == "dense":
            s = a @ w.T
        else:
            s = np.einsum("of,nfl->nol", w, a)
        z = _activate(spec.activation, s)
        inputs.append(a)
        pre.append(s)
        post.append(z)
        h = z
    return h.reshape(n, -1), ForwardCache(inputs, pre, post, h.reshape(n, -1))


def per_sample_loss(loss, out, targets):
    if loss == "softmax-cross-entropy":
        logp = log_softmax(out, axis=1)
        return -logp[np.arange(out.shape[0]), targets]
    # binary cross-entropy on logits, summed over output units
    return np.sum(np.logaddexp(0.0, out) - targets * out, axis=1)


def _output_grad(loss, out, targets):
    if loss == "softmax-cross-entropy":
        g = softmax(out, axis=1)
        g[np.arange(out.shape[0]), targets] -= 1.0
        return g
    return expit(out) - targets


def loss_value(net, x, targets):
    """Mean loss over the batch."""
    out, _ = forward(net, x)
    return float(np.mean(per_sample_loss(net.loss, out, np.asarray(targets))))


def sample_labels(logits, rng, loss="softmax-cross-entropy"):
    """Draw targets from the model's predictive distribution.

    Categorical samples from ``softmax(logits)`` for classification, independent
    Bernoulli samples from ``sigmoid(logits)`` for binary cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if loss == "softmax-cross-entropy":
        p = softmax(logits, axis=1)
        u = rng.random((logits.shape[0], 1))
        cdf = np.cumsum(p, axis=1)
        idx = np.sum(cdf < u, axis=1)
        return np.minimum(idx, logits.shape[1] - 1)
    return (rng.random(logits.shape) < expit(logits)).astype(np.float64)


@dataclass
class BatchTrace:
    """Per-sample quantities captured by a backward pass.

    ``acts[l]``: layer inputs, dense ``(N, fan_in)`` or conv ``(N, fan_in, o)``
    (the im2col matrix of each sample).  ``grads[l]``: pre-activation gradients
    of the per-sample loss, dense ``(N, fan_out)`` or conv ``(N, n_out, o)``.
    ``mean_grads[l]``: gradient of the mean loss w.r.t. ``W_l``.
    """

    layers: list
    acts: list
    grads: list
    mean_grads: list
    loss: float
    targets: np.ndarray = field(repr=False, default=None)

    @property
    def n_samples(self):
        return self.acts[0].shape[0]

    def sample_grad(self, l, i):
        """``DW_l`` for sample ``i``: ``g a^T`` (dense) or ``DS Ahat^T`` (conv)."""
        if self.layers[l].kind == "dense":
            return np.outer(self.grads[l][i], self.acts[l][i])
        return self.grads[l][i] @ self.acts[l][i].T


def backward(net, cache, targets=None, label_mode="data", rng=None):
    """Backpropagate the loss and return a :class:`BatchTrace`.

    With ``label_mode="model-sample"`` the targets are drawn from the model's
    predictive distribution using ``rng`` (true Fisher); with ``"data"`` the
    given targets are used (empirical Fisher / ordinary gradient).
    """
    out = cache.output
    n = out.shape[0]
    if label_mode == "model-sample":
        if rng is None:
            raise ValueError("model-sample label mode needs an rng")
        targets = sample_labels(out, rng, net.loss)
    elif label_mode != "data":
        raise ValueError(f"unknown label_mode {label_mode!r}")
    if targets is None:
        raise ValueError("data label mode needs targets")
    targets = np.asarray(targets)
    if net.loss == "softmax-cross-entropy":
        targets = targets.astype(np.intp)
    elif targets.shape != out.shape:
        raise ValueError(f"targets shape {targets.shape} != output shape {out.shape}")
    losses = per_sample_loss(net.loss, out, targets)

    grads = [None] * len(net.layers)
    mean_grads = [None] * len(net.layers)
    d_out = _output_grad(net.loss, out, targets)  # dL_i/d(output)
    d_act = d_out.reshape(cache.post[-1].shape)
    for l in range(len(net.layers) - 1, -1, -1):
        spec, w = net.layers[l], net.weights[l]
        s, z, a = cache.pre[l], cache.post[l], cache.inputs[l]
        g = d_act.reshape(s.shape) * _activation_grad(spec.activation, s, z)
        grads[l] = g
        if spec.kind == "dense":
            mean_grads[l] = g.T @ a / n
            if l == 0:
                break
            da = g @ w
            if spec.homogeneous:
                da = da[:, :-1]
        else:
            mean_grads[l] = np.einsum("nol,nfl->of", g, a) / n
            if l == 0:
                break
            dcols = np.einsum("of,nol->nfl", w, g)
            if spec.homogeneous:
                dcols = dcols[:, :-1]
            da = col2im(dcols, (n, spec.in_channels, *spec.in_hw),
                        spec.kernel, spec.stride, spec.padding)
        d_act = da.reshape(cache.post[l - 1].shape)
    return BatchTrace(list(net.layers), list(cache.inputs), grads, mean_grads,
                      float(np.mean(losses)), targets)
