"""Small dense/convolutional feedforward nets and a vanilla RNN, with exact
forward and backward passes.

The backward passes here are the ground-truth gradient oracle for every
learning rule in the package, so they are written for clarity and checked
against central finite differences in the test suite. Convolutions are
explicit im2col + matmul; post-activations flatten in C order
(channel-major, then row, then column), which fixes the indexing of every
per-layer feedback and basis matrix.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics

logger = logging.getLogger(__name__)

DENSE = "dense"
CONV2D = "conv2d"
OUTPUT_DENSE = "output-dense"


def _relu(s):
    return np.maximum(s, 0.0)


def _relu_deriv(s):
    # derivative at exactly 0 is defined as 0
    return (s > 0).astype(np.float64)


def _tanh_deriv(s):
    t = np.tanh(s)
    return 1.0 - t * t


ACTIVATIONS = {
    "relu": (_relu, _relu_deriv),
    "tanh": (np.tanh, _tanh_deriv),
    "identity": (lambda s: s, lambda s: np.ones_like(s)),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in (DENSE, CONV2D, OUTPUT_DENSE):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == CONV2D and self.kernel < 1:
            raise ValueError("conv2d layers need a positive kernel size")


def dense(in_dim, out_dim, activation="relu"):
    return LayerSpec(DENSE, in_dim, out_dim, activation=activation)


def conv2d(in_channels, out_channels, kernel, stride, padding, activation="relu"):
    return LayerSpec(CONV2D, in_channels, out_channels, kernel, stride, padding, activation)


def output_dense(in_dim, out_dim):
    return LayerSpec(OUTPUT_DENSE, in_dim, out_dim, activation="identity")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def image_classifier_specs(width_multiplier=1.0, num_classes=10, fc_width=None):
    """The reference image-classifier stack at a given width multiplier.

    Multiplier 1 gives conv channels 64/128/256 and a 1024-unit dense layer
    on 3x32x32 inputs; 1/8 is the desk-scale default used by the experiment
    configs.
    """
    c1 = max(1, round(64 * width_multiplier))
    c2 = max(1, round(128 * width_multiplier))
    c3 = max(1, round(256 * width_multiplier))
    fc = fc_width if fc_width is not None else max(1, round(1024 * width_multiplier))
    side = conv_output_size(conv_output_size(conv_output_size(32, 5, 2, 2), 5, 2, 2), 3, 2, 1)
    return [
        conv2d(3, c1, kernel=5, stride=2, padding=2),
        conv2d(c1, c2, kernel=5, stride=2, padding=2),
        conv2d(c2, c3, kernel=3, stride=2, padding=1),
        dense(c3 * side * side, fc),
        output_dense(fc, num_classes),
    ]


def _im2col(x, kernel, stride, padding):
    """(B, C, H, W) -> (B, C*k*k, OH*OW) patch matrix."""
    b, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kernel, kernel, oh, ow))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kernel * kernel, oh * ow)


def _col2im(cols, x_shape, kernel, stride, padding):
    """Adjoint of _im2col: scatter-add patch gradients back to input shape."""
    b, c, h, w = x_shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    cols = cols.reshape(b, c, kernel, kernel, oh, ow)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + w]


class _DenseLayer:
    def __init__(self, spec, rng):
        self.spec = spec
        fan_in = spec.in_channels
        gain = 2.0 if spec.activation == "relu" else 1.0
        self.weight = rng.standard_normal((spec.out_channels, fan_in)) * np.sqrt(gain / fan_in)
        self.bias = np.zeros(spec.out_channels)

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.spec.in_channels:
            raise ValueError(
                f"dense layer expects {self.spec.in_channels} inputs, got shape {in_shape}"
            )
        return (self.spec.out_channels,)

    def preactivation(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight.T + self.bias, None

    def weight_grad(self, ds, x_prev):
        ds = ds.reshape(ds.shape[0], -1)
        xp = x_prev.reshape(x_prev.shape[0], -1)
        return ds.T @ xp, ds.sum(axis=0)

    def input_grad(self, ds, x_prev_shape):
        ds = ds.reshape(ds.shape[0], -1)
        return (ds @ self.weight).reshape((ds.shape[0],) + x_prev_shape)

    @property
    def params(self):
        return [self.weight, self.bias]


class _ConvLayer:
    def __init__(self, spec, rng):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        gain = 2.0 if spec.activation == "relu" else 1.0
        self.weight = rng.standard_normal((spec.out_channels, fan_in)) * np.sqrt(gain / fan_in)
        self.bias = np.zeros(spec.out_channels)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.spec.in_channels:
            raise ValueError(f"conv layer expects {self.spec.in_channels} channels, got {c}")
        oh = conv_output_size(h, self.spec.kernel, self.spec.stride, self.spec.padding)
        ow = conv_output_size(w, self.spec.kernel, self.spec.stride, self.spec.padding)
        return (self.spec.out_channels, oh, ow)

    def preactivation(self, x):
        cols = _im2col(x, self.spec.kernel, self.spec.stride, self.spec.padding)
        s = np.matmul(self.weight, cols) + self.bias[None, :, None]
        oh, ow = self.out_shape(x.shape[1:])[1:]
        return s.reshape(x.shape[0], self.spec.out_channels, oh, ow), cols

    def weight_grad(self, ds, x_prev, cols=None):
        b = ds.shape[0]
        if cols is None:
            cols = _im2col(x_prev, self.spec.kernel, self.spec.stride, self.spec.padding)
        dsl = ds.reshape(b, self.spec.out_channels, -1)
        dw = np.matmul(dsl, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw, dsl.sum(axis=(0, 2))

    def input_grad(self, ds, x_prev_shape):
        b = ds.shape[0]
        dsl = ds.reshape(b, self.spec.out_channels, -1)
        dcols = np.matmul(self.weight.T, dsl)
        return _col2im(
            dcols, (b,) + x_prev_shape, self.spec.kernel, self.spec.stride, self.spec.padding
        )

    @property
    def params(self):
        return [self.weight, self.bias]


@dataclass
class ForwardCache:
    """Per-call record of one forward pass: input, every s_l and x_l, output."""

    x_in: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    cols: list = field(default_factory=list)

    @property
    def output(self):
        return self.post[-1].reshape(self.post[-1].shape[0], -1)

    def post_flat(self, layer):
        a = self.post[layer]
        return a.reshape(a.shape[0], -1)

    def prev_post(self, layer):
        return self.x_in if layer == 0 else self.post[layer - 1]


@dataclass
class BackpropResult:
    loss: float
    delta_out: np.ndarray
    act_grads: list
    weight_grads: list
    bias_grads: list


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_indices(targets, num_classes):
    """Integer arrays are class indices; float arrays are one-hot rows."""
    targets = np.asarray(targets)
    if np.issubdtype(targets.dtype, np.floating):
        if targets.shape[-1] != num_classes:
            raise ValueError(f"one-hot targets must have {num_classes} columns")
        return targets.argmax(axis=-1)
    return targets.astype(np.intp)


def cross_entropy(logits, targets):
    """Mean softmax cross entropy; targets are class indices or one-hot rows."""
    idx = _as_indices(targets, logits.shape[-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flat = logp.reshape(-1, logits.shape[-1])
    return float(-flat[np.arange(flat.shape[0]), idx.ravel()].mean())


class Network:
    """Feedforward net: ordered layers, their weights, and exact passes."""

    def __init__(self, specs, input_shape, rng):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.layers = []
        self.shapes = []
        shape = self.input_shape
        for spec in self.specs:
            layer = _ConvLayer(spec, rng) if spec.kind == CONV2D else _DenseLayer(spec, rng)
            shape = layer.out_shape(shape)
            self.layers.append(layer)
            self.shapes.append(shape)

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def hidden_indices(self):
        return list(range(self.num_layers - 1))

    @property
    def flat_dims(self):
        return [int(np.prod(s)) for s in self.shapes]

    @property
    def output_dim(self):
        return self.flat_dims[-1]

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"layer 0 expects input shape {self.input_shape}, got {x.shape[1:]}"
            )
        return x

    def forward(self, x, noise=None):
        """Run the net, caching every pre- and post-activation.

        `noise` optionally maps hidden-layer index -> flat perturbation
        (n_l,) or (B, n_l), added to the post-activation before it feeds the
        next layer.
        """
        x = self._check_input(x)
        cache = ForwardCache(x_in=x)
        noise = noise or {}
        for layer_idx in noise:
            if layer_idx not in self.hidden_indices:
                raise ValueError(f"noise index {layer_idx} is not a hidden layer")
        missing = [l for l in self.hidden_indices if l not in noise]
        if noise and missing:
            logger.info("layers %s receive zero perturbation this pass", missing)
        h = x
        for l, layer in enumerate(self.layers):
            s, cols = layer.preactivation(h)
            act, _ = ACTIVATIONS[layer.spec.activation]
            post = act(s)
            if l in noise:
                xi = np.asarray(noise[l], dtype=np.float64)
                if xi.ndim == 1:
                    xi = np.broadcast_to(xi, (x.shape[0], xi.shape[0]))
                if xi.shape != (x.shape[0], self.flat_dims[l]):
                    raise ValueError(
                        f"noise for layer {l} must have flat dim {self.flat_dims[l]}"
                    )
                post = post + xi.reshape(post.shape)
            cache.pre.append(s)
            cache.post.append(post)
            cache.cols.append(cols)
            h = post
        return cache

    def noisy_forward(self, x, noise, clean_cache=None):
        """Perturbed pass; returns (noisy output, output change vs clean pass)."""
        if clean_cache is None:
            clean_cache = self.forward(x)
        noisy = self.forward(x, noise=noise)
        dy = noisy.output - clean_cache.output
        return noisy.output, dy

    def loss(self, x, targets):
        return cross_entropy(self.forward(x).output, targets)

    def delta_out(self, logits, targets):
        """(1/N_b)(softmax(y) - y_target): the exact output error row per example."""
        idx = _as_indices(targets, logits.shape[-1])
        d = softmax(logits)
        d[np.arange(logits.shape[0]), idx] -= 1.0
        return d / logits.shape[0]

    def backprop(self, x, targets, cache=None):
        """Exact gradients of mean softmax cross entropy.

        Returns loss, delta_out, per-layer activation gradients dL/dx_l
        (flattened), and per-layer weight/bias gradients.
        """
        if cache is None:
            cache = self.forward(x)
        logits = cache.output
        loss = cross_entropy(logits, targets)
        d_out = self.delta_out(logits, targets)
        act_grads = [None] * self.num_layers
        weight_grads = [None] * self.num_layers
        bias_grads = [None] * self.num_layers
        act_grads[-1] = d_out
        dpost = d_out.reshape(cache.post[-1].shape)
        for l in reversed(range(self.num_layers)):
            layer = self.layers[l]
            _, deriv = ACTIVATIONS[layer.spec.activation]
            ds = dpost * deriv(cache.pre[l])
            x_prev = cache.prev_post(l)
            if isinstance(layer, _ConvLayer):
                weight_grads[l], bias_grads[l] = layer.weight_grad(ds, x_prev, cache.cols[l])
            else:
                weight_grads[l], bias_grads[l] = layer.weight_grad(ds, x_prev)
            if l > 0:
                dpost = layer.input_grad(ds, cache.post[l - 1].shape[1:])
                act_grads[l - 1] = dpost.reshape(x.shape[0], -1)
        return BackpropResult(loss, d_out, act_grads, weight_grads, bias_grads)

    def weight_grads_from_delta(self, cache, layer_idx, delta_pre_flat):
        """Weight/bias gradients of layer `layer_idx` given a (B, n_l) flat
        pre-activation error, exact or pseudo."""
        layer = self.layers[layer_idx]
        ds = delta_pre_flat.reshape((delta_pre_flat.shape[0],) + self.shapes[layer_idx])
        x_prev = cache.prev_post(layer_idx)
        if isinstance(layer, _ConvLayer):
            return layer.weight_grad(ds, x_prev, cache.cols[layer_idx])
        return layer.weight_grad(ds, x_prev)

    def jacobian(self, x, layer_idx):
        """J_l = d(output)/d(x_l) for a single input, shape (n_o, n_l).

        Implemented as n_o backward passes batched together: the seed is the
        identity on the output and is propagated down to layer l's
        post-activation.
        """
        if layer_idx not in self.hidden_indices:
            raise ValueError(f"layer {layer_idx} is not a hidden layer of this net")
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[0] != 1:
            raise ValueError("jacobian expects a single input")
        cache = self.forward(x)
        n_o = self.output_dim
        dpost = np.eye(n_o).reshape((n_o,) + self.shapes[-1])
        for l in range(self.num_layers - 1, layer_idx, -1):
            layer = self.layers[l]
            _, deriv = ACTIVATIONS[layer.spec.activation]
            ds = dpost * deriv(cache.pre[l])
            dpost = layer.input_grad(ds, self.shapes[l - 1])
        return dpost.reshape(n_o, -1)


class Rnn:
    """Vanilla tanh RNN with a linear readout at every timestep."""

    def __init__(self, input_dim, hidden_dim, output_dim, rng):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.w_xh = rng.standard_normal((hidden_dim, input_dim)) / np.sqrt(input_dim)
        self.w_hh = rng.standard_normal((hidden_dim, hidden_dim)) / np.sqrt(hidden_dim)
        self.b_h = np.zeros(hidden_dim)
        self.w_hy = rng.standard_normal((output_dim, hidden_dim)) / np.sqrt(hidden_dim)
        self.b_y = np.zeros(output_dim)

    def recurrent_params(self):
        """Tensors trained by weight perturbation; bias as a column matrix view."""
        return {"w_hh": self.w_hh, "w_xh": self.w_xh, "b_h": self.b_h.reshape(-1, 1)}

    def forward(self, inputs):
        """inputs (B, T, input_dim) -> (hidden trajectory (B, T+1, H), logits (B, T, O))."""
        inputs = np.asarray(inputs, dtype=np.float64)
        b, t, d = inputs.shape
        if d != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {d}")
        hs = np.zeros((b, t + 1, self.hidden_dim))
        logits = np.empty((b, t, self.output_dim))
        h = hs[:, 0]
        for step in range(t):
            s = inputs[:, step] @ self.w_xh.T + h @ self.w_hh.T + self.b_h
            h = np.tanh(s)
            hs[:, step + 1] = h
            logits[:, step] = h @ self.w_hy.T + self.b_y
        return hs, logits

    def forward_loss(self, inputs, targets):
        """Mean cross entropy over every timestep; also returns the hidden
        trajectory so manifold estimators can consume it."""
        inputs = np.asarray(inputs)
        targets = np.asarray(targets)
        if targets.shape[:2] != inputs.shape[:2]:
            raise ValueError(
                f"targets length {targets.shape[:2]} does not match inputs {inputs.shape[:2]}"
            )
        hs, logits = self.forward(inputs)
        return cross_entropy(logits, targets), hs, logits

    def backprop(self, inputs, targets):
        """Full backpropagation through time for all five parameter tensors."""
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets)
        hs, logits = self.forward(inputs)
        b, t, _ = inputs.shape
        idx = _as_indices(targets, self.output_dim)
        dlogits = softmax(logits)
        flat = dlogits.reshape(-1, self.output_dim)
        flat[np.arange(flat.shape[0]), idx.ravel()] -= 1.0
        dlogits /= b * t
        grads = {
            "w_hy": np.einsum("bto,bth->oh", dlogits, hs[:, 1:]),
            "b_y": dlogits.sum(axis=(0, 1)),
            "w_xh": np.zeros_like(self.w_xh),
            "w_hh": np.zeros_like(self.w_hh),
            "b_h": np.zeros_like(self.b_h),
        }
        dh_next = np.zeros((b, self.hidden_dim))
        for step in range(t - 1, -1, -1):
            dh = dlogits[:, step] @ self.w_hy + dh_next
            ds = dh * (1.0 - hs[:, step + 1] ** 2)
            grads["w_xh"] += ds.T @ inputs[:, step]
            grads["w_hh"] += ds.T @ hs[:, step]
            grads["b_h"] += ds.sum(axis=0)
            dh_next = ds @ self.w_hh
        return cross_entropy(logits, targets), grads

    def readout_grads(self, hs, logits, targets):
        """Exact gradients for the readout only (no propagation through time)."""
        b, t, _ = logits.shape
        idx = _as_indices(targets, self.output_dim)
        dlogits = softmax(logits)
        flat = dlogits.reshape(-1, self.output_dim)
        flat[np.arange(flat.shape[0]), idx.ravel()] -= 1.0
        dlogits /= b * t
        return {
            "w_hy": np.einsum("bto,bth->oh", dlogits, hs[:, 1:]),
            "b_y": dlogits.sum(axis=(0, 1)),
        }


def sgd_momentum_step(params, grads, lr, momentum, velocity):
    """Heavy-ball update in place: v <- momentum*v + g; p <- p - lr*v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def zero_velocity(params):
    return [np.zeros_like(p) for p in params]
