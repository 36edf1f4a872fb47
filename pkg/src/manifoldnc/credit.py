"""Feedback-weight learning rules and the training loop that uses them.

Direct rules (nmnc, vnc, dfa) keep one feedback matrix per hidden layer
mapping the output error to a layer-local pseudo-error. The noise-correlation
rules learn that matrix by injecting perturbations during periodic noisy
forward passes and correlating them with the output change; nmnc draws the
perturbations inside each layer's estimated activity subspace, vnc draws them
isotropically with matched expected energy. The mirror rule is layerwise:
each feedback matrix maps the next layer's error one step back and is trained
on that layer's local response to injected noise. The output layer is always
trained with exact gradients.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .manifold import ManifoldTracker
from .nets import ACTIVATIONS

logger = logging.getLogger(__name__)

RULES = ("backprop", "nmnc", "vnc", "dfa", "mirror")
INIT_MODES = ("initjac", "permuted-initjac", "random")


def matched_sigma_vnc(manifold_dim, ambient_dim, sigma_nmnc):
    """Isotropic noise scale with the same expected energy as a manifold draw:
    sigma_vnc = sqrt(d/n) * sigma_nmnc, so E||xi||^2 matches across methods."""
    if not 1 <= manifold_dim <= ambient_dim:
        raise ValueError(
            f"need 1 <= manifold_dim <= ambient_dim, got {manifold_dim} vs {ambient_dim}"
        )
    return np.sqrt(manifold_dim / ambient_dim) * sigma_nmnc


@dataclass
class NoiseDraw:
    xi: np.ndarray
    zeta: np.ndarray | None
    method: str


def sample_noise(method, count, sigma, rng, components=None, ambient_dim=None):
    """Draw `count` perturbation rows.

    nmnc: zeta ~ N(0, sigma^2 I_d) mapped through the basis, so xi lies in
    span(components) exactly. vnc: xi ~ N(0, sigma^2 I_n).
    """
    if method == "nmnc":
        if components is None:
            raise ValueError("nmnc noise needs a component basis")
        d = components.shape[1]
        zeta = sigma * rng.standard_normal((count, d))
        return NoiseDraw(xi=zeta @ components.T, zeta=zeta, method=method)
    if method == "vnc":
        if ambient_dim is None:
            raise ValueError("vnc noise needs the ambient dimension")
        xi = sigma * rng.standard_normal((count, ambient_dim))
        return NoiseDraw(xi=xi, zeta=None, method=method)
    raise ValueError(f"unknown noise method {method!r}")


def feedback_update(fb, xi, dy, eta_b):
    """EMA toward the batch-mean outer product of noise and output change."""
    n_b = xi.shape[0]
    return (1.0 - eta_b) * fb + eta_b * (xi.T @ dy) / n_b


def pseudo_error(fb, delta_out, pre_flat, activation):
    """delta_l = phi'(s_l) * (B_l delta_out), rows per example."""
    deriv = ACTIVATIONS[activation][1]
    return deriv(pre_flat) * (delta_out @ fb.T)


def forward_weight_update(delta, x_prev):
    """Local weight gradient: per-example outer products summed over the
    batch. delta already carries the 1/N_b of the output error, so this is
    exactly the dense-layer gradient; the optimizer applies -lr."""
    return delta.reshape(delta.shape[0], -1).T @ x_prev.reshape(x_prev.shape[0], -1)


def init_jacobian_feedback(net, rng, batch_size=32, permute=False):
    """Feedback matrices set to the input-averaged initial Jacobian (transposed
    to n_l x n_o); the permuted variant shuffles all entries of each matrix,
    destroying structure but preserving the value multiset."""
    inputs = rng.standard_normal((batch_size,) + net.input_shape)
    mats = []
    for l in net.hidden_indices:
        acc = np.zeros((net.flat_dims[l], net.output_dim))
        for i in range(batch_size):
            acc += net.jacobian(inputs[i : i + 1], l).T
        b0 = acc / batch_size
        if permute:
            b0 = rng.permutation(b0.ravel()).reshape(b0.shape)
        mats.append(b0)
    return mats


def weight_mirror_update(fb, noise, response, lambda_b, eta_b):
    """Decay-plus-correlation update toward the noise/next-layer-response
    outer product."""
    n_b = noise.shape[0]
    return (1.0 - lambda_b) * fb + eta_b * (noise.T @ response) / n_b


@dataclass
class RuleConfig:
    rule: str = "nmnc"
    eta_b: float = 0.001
    update_interval: int = 5
    sigma: float = 1.0
    pcs: list = field(default_factory=list)
    init: str = "permuted-initjac"
    mirror_decay: float = 0.5
    mirror_noise: str = "vnc"
    per_example_noise: bool = True
    same_minibatch: bool = True
    queue_capacity: int = 4

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}, expected one of {RULES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")


@dataclass
class FeedbackState:
    rule: str
    matrices: list
    update_counts: list

    def copy_matrices(self):
        return [m.copy() for m in self.matrices]


def init_feedback(net, config, rng):
    """Build the feedback matrices for a direct or layerwise rule."""
    if config.rule == "backprop":
        return FeedbackState(config.rule, [], [])
    hidden = net.hidden_indices
    if config.rule == "mirror":
        mats = []
        for l in hidden:
            n_next = net.flat_dims[l + 1]
            mats.append(rng.standard_normal((net.flat_dims[l], n_next)) / np.sqrt(n_next))
    elif config.init == "random":
        mats = [
            rng.standard_normal((net.flat_dims[l], net.output_dim)) / np.sqrt(net.output_dim)
            for l in hidden
        ]
    else:
        mats = init_jacobian_feedback(net, rng, permute=config.init == "permuted-initjac")
    return FeedbackState(config.rule, mats, [0] * len(hidden))


def _local_response(net, cache, layer_idx, xi_flat):
    """Post-nonlinearity change at layer l+1 when noise is added to x_l."""
    x_l = cache.post[layer_idx]
    perturbed = x_l + xi_flat.reshape(x_l.shape)
    layer = net.layers[layer_idx + 1]
    s_pert, _ = layer.preactivation(perturbed)
    act = ACTIVATIONS[layer.spec.activation][0]
    clean = act(cache.pre[layer_idx + 1])
    return (act(s_pert) - clean).reshape(xi_flat.shape[0], -1)


@dataclass
class EpochMetrics:
    train_loss: float
    iterations: int
    feedback_updates: list
    pca_updates: list


class Trainer:
    """Owns a network, its feedback state, and the optimizer state.

    One trainer per run; the iteration counter persists across epochs so the
    noise-correlation phase fires exactly floor(T / b) times over T batches.
    """

    def __init__(self, net, config, lr, momentum, rng_feedback, rng_noise, rng_pca=None):
        self.net = net
        self.config = config
        self.lr = lr
        self.momentum = momentum
        self.rng_noise = rng_noise
        self.feedback = init_feedback(net, config, rng_feedback)
        self.velocity = nets.zero_velocity(net.parameters())
        self.iteration = 0
        self.trackers = {}
        if config.rule in ("nmnc", "vnc", "mirror") and len(config.pcs) != len(
            net.hidden_indices
        ):
            raise ValueError(
                f"pcs must list one dimension per hidden layer "
                f"({len(net.hidden_indices)}), got {config.pcs}"
            )
        needs_tracking = config.rule == "nmnc" or (
            config.rule == "mirror" and config.mirror_noise == "nmnc"
        )
        if needs_tracking:
            if rng_pca is None:
                raise ValueError("manifold-restricted rules need a PCA rng")
            for l, d in zip(net.hidden_indices, config.pcs):
                self.trackers[l] = ManifoldTracker(
                    net.flat_dims[l], d, rng_pca, queue_capacity=config.queue_capacity
                )

    def _layer_sigma(self, layer_idx):
        d = self.config.pcs[layer_idx]
        n = self.net.flat_dims[layer_idx]
        if self.config.rule == "vnc" or (
            self.config.rule == "mirror" and self.config.mirror_noise == "vnc"
        ):
            return matched_sigma_vnc(d, n, self.config.sigma)
        return self.config.sigma

    def _draw_layer_noise(self, layer_idx, batch_size):
        method = "nmnc" if layer_idx in self.trackers else "vnc"
        count = batch_size if self.config.per_example_noise else 1
        draw = sample_noise(
            method,
            count,
            self._layer_sigma(layer_idx),
            self.rng_noise,
            components=self.trackers[layer_idx].components() if method == "nmnc" else None,
            ambient_dim=self.net.flat_dims[layer_idx],
        )
        xi = draw.xi
        if xi.shape[0] == 1 and batch_size > 1:
            xi = np.broadcast_to(xi, (batch_size, xi.shape[1]))
        return xi

    def _noise_phase(self, xb, cache):
        cfg = self.config
        if not cfg.same_minibatch:
            # fresh perturbation batch: resample inputs with replacement
            idx = self.rng_noise.integers(0, xb.shape[0], size=xb.shape[0])
            xb = xb[idx]
            cache = self.net.forward(xb)
        batch_size = xb.shape[0]
        if cfg.rule in ("nmnc", "vnc"):
            for l in self.trackers:
                self.trackers[l].submit(cache.post_flat(l))
                self.trackers[l].process_pending()
            noise = {l: self._draw_layer_noise(l, batch_size) for l in self.net.hidden_indices}
            _, dy = self.net.noisy_forward(xb, noise, clean_cache=cache)
            for i, l in enumerate(self.net.hidden_indices):
                self.feedback.matrices[i] = feedback_update(
                    self.feedback.matrices[i], noise[l], dy, cfg.eta_b
                )
                self.feedback.update_counts[i] += 1
        elif cfg.rule == "mirror":
            for l in self.trackers:
                self.trackers[l].submit(cache.post_flat(l))
                self.trackers[l].process_pending()
            for i, l in enumerate(self.net.hidden_indices):
                xi = self._draw_layer_noise(l, batch_size)
                response = _local_response(self.net, cache, l, xi)
                self.feedback.matrices[i] = weight_mirror_update(
                    self.feedback.matrices[i], xi, response, cfg.mirror_decay, cfg.eta_b
                )
                self.feedback.update_counts[i] += 1

    def pseudo_deltas(self, cache, delta_out):
        """Pre-activation error rows per layer under the current feedback.

        For direct rules every hidden layer reads the output error through
        its own matrix; for mirror the error is chained one layer at a time.
        The output layer's exact error is always the last entry.
        """
        net = self.net
        deltas = [None] * net.num_layers
        deltas[-1] = delta_out  # identity output activation: ds = dy
        if self.feedback.rule == "mirror":
            err = delta_out
            for i in reversed(net.hidden_indices):
                err = err @ self.feedback.matrices[i].T
                deriv = ACTIVATIONS[net.specs[i].activation][1]
                deltas[i] = deriv(cache.pre[i].reshape(err.shape[0], -1)) * err
                # feedback encodes the next layer's gating on average, so the
                # chained error stays ungated
        else:
            for i, l in enumerate(net.hidden_indices):
                deltas[l] = pseudo_error(
                    self.feedback.matrices[i],
                    delta_out,
                    cache.pre[l].reshape(delta_out.shape[0], -1),
                    net.specs[l].activation,
                )
        return deltas

    def train_batch(self, xb, yb):
        self.iteration += 1
        cache = self.net.forward(xb)
        loss = nets.cross_entropy(cache.output, yb)
        if (
            self.feedback.rule in ("nmnc", "vnc", "mirror")
            and self.iteration % self.config.update_interval == 0
        ):
            self._noise_phase(xb, cache)
        if self.feedback.rule == "backprop":
            bp = self.net.backprop(xb, yb, cache=cache)
            weight_grads, bias_grads = bp.weight_grads, bp.bias_grads
        else:
            delta_out = self.net.delta_out(cache.output, yb)
            deltas = self.pseudo_deltas(cache, delta_out)
            weight_grads, bias_grads = [], []
            for l in range(self.net.num_layers):
                dw, db = self.net.weight_grads_from_delta(cache, l, deltas[l])
                weight_grads.append(dw)
                bias_grads.append(db)
        grads = []
        for dw, db in zip(weight_grads, bias_grads):
            grads.extend([dw, db])
        nets.sgd_momentum_step(self.net.parameters(), grads, self.lr, self.momentum, self.velocity)
        return loss

    def train_epoch(self, x, y, batch_size, rng_shuffle):
        """One pass over the data in shuffled order; returns epoch metrics."""
        n = x.shape[0]
        order = rng_shuffle.permutation(n)
        losses = []
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            losses.append(self.train_batch(x[idx], y[idx]))
        return EpochMetrics(
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            iterations=self.iteration,
            feedback_updates=list(self.feedback.update_counts),
            pca_updates=[self.trackers[l].updates_applied for l in sorted(self.trackers)],
        )


def evaluate_accuracy(net, x, y, batch_size=256):
    correct = 0
    y = np.asarray(y)
    for start in range(0, x.shape[0], batch_size):
        logits = net.forward(x[start : start + batch_size]).output
        correct += int((logits.argmax(axis=1) == y[start : start + batch_size]).sum())
    return correct / x.shape[0]
