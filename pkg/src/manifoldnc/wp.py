"""Weight-perturbation gradient estimators for recurrent nets.

Families: full i.i.d. Gaussian, rank-1 with i.i.d. factors, rank-1 with the
row factor drawn in a fixed random subspace, rank-1 with the row factor drawn
in the live hidden-state manifold, and rank-r sums of outer products with
1/sqrt(r) normalization. Raw draws are isotropy-normalized (vectorized second
moment = identity for the i.i.d. families); training draws are additionally
rescaled to a fixed Frobenius norm, which is validated separately because the
rescaling conditions on the draw's own norm.
"""

from dataclasses import dataclass

import numpy as np

from . import nets
from .manifold import ManifoldTracker

FAMILIES = ("full", "rank1-iid", "rank1-fixed-subspace", "rank1-manifold", "rank-r")
_SUBSPACE_FAMILIES = ("rank1-fixed-subspace", "rank1-manifold")


@dataclass
class PerturbationSpec:
    family: str
    rows: int
    cols: int
    epsilon: float = 1e-4
    epsilon_wp: float = 1e-4
    rank: int = 1
    subspace_dim: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown perturbation family {self.family!r}")
        if self.family == "rank-r" and self.rank < 1:
            raise ValueError("rank-r family needs rank >= 1")


def draw_direction(family, rows, cols, rng, basis=None, rank=1):
    """One raw (pre-rescale) perturbation matrix of the given family.

    For the subspace families, every rank-1 factor whose dimension matches
    the basis's ambient dimension is drawn inside the basis span (factor =
    basis @ a, a ~ N(0, I)); factors living in other spaces (e.g. the input
    side of an input-weight matrix) stay i.i.d. Gaussian. At least one
    factor must match, otherwise the subspace family is meaningless for the
    requested shape.
    """
    if family == "full":
        return rng.standard_normal((rows, cols))
    if family == "rank1-iid":
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return np.outer(u, v)
    if family in _SUBSPACE_FAMILIES:
        if basis is None:
            raise ValueError(f"{family} needs a subspace basis")
        ambient = basis.shape[0]
        if rows != ambient and cols != ambient:
            raise ValueError(
                f"basis lives in dimension {ambient}, but the perturbation is {rows}x{cols}"
            )
        u = basis @ rng.standard_normal(basis.shape[1]) if rows == ambient \
            else rng.standard_normal(rows)
        v = basis @ rng.standard_normal(basis.shape[1]) if cols == ambient \
            else rng.standard_normal(cols)
        return np.outer(u, v)
    if family == "rank-r":
        u = rng.standard_normal((rows, rank))
        v = rng.standard_normal((cols, rank))
        return (u @ v.T) / np.sqrt(rank)
    raise ValueError(f"unknown perturbation family {family!r}")


def draw_perturbation(spec, rng, basis=None):
    """Family draw rescaled so ||E||_F = epsilon_wp * sqrt(rows * cols)."""
    raw = draw_direction(spec.family, spec.rows, spec.cols, rng, basis=basis, rank=spec.rank)
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise ValueError("degenerate zero perturbation draw")
    return raw * (spec.epsilon_wp * np.sqrt(spec.rows * spec.cols) / norm)


def antithetic_estimate(loss_fn, w, direction, eps):
    """Two-sided probe: [(L(W + eps E) - L(W - eps E)) / (2 eps)] * E."""
    if eps <= 0:
        raise ValueError("probe scale eps must be positive")
    up = loss_fn(w + eps * direction)
    down = loss_fn(w - eps * direction)
    if not (np.isfinite(up) and np.isfinite(down)):
        raise ValueError("loss returned a non-finite value during probing")
    return ((up - down) / (2.0 * eps)) * direction


def mse_closed_form(family, rows, cols, k):
    """Predicted Frobenius MSE coefficient (units of ||G||_F^2) after
    averaging k independent single-draw estimates.

    full: (d + 1) / k with d = rows * cols. rank1-iid:
    ((rows + 2) (cols + 2) - 1) / k. Other families have no closed form here
    and return None.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if family == "full":
        return (rows * cols + 1) / k
    if family == "rank1-iid":
        return ((rows + 2) * (cols + 2) - 1) / k
    return None


def mse_oracle(family, target_grad, k, trials, rng, rank=1, chunk=512):
    """Monte-Carlo Frobenius MSE coefficient of the linearized estimator.

    Uses the linear loss L(W) = <G, W>, for which the small-eps form
    G_hat = <G, E> E is exact, and averages ||mean of k draws - G||^2 / ||G||^2
    over independent trials.
    """
    g = np.asarray(target_grad, dtype=np.float64)
    if not np.any(g):
        raise ValueError("target gradient must be nonzero")
    rows, cols = g.shape
    g2 = float((g * g).sum())
    total = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        if family == "full":
            e = rng.standard_normal((m, k, rows, cols))
        elif family == "rank1-iid":
            u = rng.standard_normal((m, k, rows, 1))
            v = rng.standard_normal((m, k, 1, cols))
            e = u * v
        elif family == "rank-r":
            u = rng.standard_normal((m, k, rows, rank))
            v = rng.standard_normal((m, k, cols, rank))
            e = np.einsum("mkir,mkjr->mkij", u, v) / np.sqrt(rank)
        else:
            raise ValueError(f"no oracle for family {family!r}")
        coeff = np.einsum("mkij,ij->mk", e, g)
        ghat = np.einsum("mk,mkij->mij", coeff, e) / k
        diff = ghat - g
        total += float((np.einsum("mij,mij->m", diff, diff) / g2).sum())
        done += m
    return total / trials


@dataclass
class WpStepResult:
    loss: float
    estimate_cos: float
    estimate_proj: float


class WpTrainer:
    """Trains an Rnn by antithetic weight perturbation.

    w_hh, w_xh and b_h are perturbed jointly (one probe pair per batch, the
    bias as an H x 1 matrix); the readout is trained with exact gradients.
    The rank1-manifold family tracks hidden states with incremental PCA,
    updated every batch; rank1-fixed-subspace freezes a random orthonormal
    basis of the same dimension at construction.
    """

    def __init__(self, rnn, family, lr, momentum, rng_noise, rng_pca=None,
                 epsilon_wp=1e-4, rank=1, subspace_dim=32):
        if family not in FAMILIES:
            raise ValueError(f"unknown perturbation family {family!r}")
        self.rnn = rnn
        self.family = family
        self.lr = lr
        self.momentum = momentum
        self.rng_noise = rng_noise
        self.epsilon_wp = epsilon_wp
        self.rank = rank
        self.tracker = None
        self.fixed_basis = None
        h = rnn.hidden_dim
        if family == "rank1-manifold":
            if rng_pca is None:
                raise ValueError("rank1-manifold needs a PCA rng")
            self.tracker = ManifoldTracker(h, subspace_dim, rng_pca)
        elif family == "rank1-fixed-subspace":
            if rng_pca is None:
                raise ValueError("rank1-fixed-subspace needs an rng for the frozen basis")
            q, _ = np.linalg.qr(rng_pca.standard_normal((h, subspace_dim)))
            self.fixed_basis = q
        self._params = rnn.recurrent_params()
        self._velocity = {name: np.zeros_like(p) for name, p in self._params.items()}
        self._readout_params = [rnn.w_hy, rnn.b_y]
        self._readout_velocity = nets.zero_velocity(self._readout_params)

    def _basis(self):
        if self.family == "rank1-manifold":
            return self.tracker.components()
        return self.fixed_basis

    def _directions(self):
        dirs = {}
        basis = self._basis()
        for name, p in self._params.items():
            rows, cols = p.shape
            raw = draw_direction(self.family, rows, cols, self.rng_noise,
                                 basis=basis, rank=self.rank)
            norm = np.linalg.norm(raw)
            dirs[name] = raw * (np.sqrt(rows * cols) / norm)
        return dirs

    def _loss_with_offset(self, inputs, targets, dirs, scale):
        saved = {name: p.copy() for name, p in self._params.items()}
        for name, p in self._params.items():
            p += scale * dirs[name]
        loss, _, _ = self.rnn.forward_loss(inputs, targets)
        for name, p in self._params.items():
            p[...] = saved[name]
        return loss

    def train_batch(self, inputs, targets, true_grad=None):
        """One antithetic WP step plus an exact readout step.

        If `true_grad` (the BPTT gradient of w_hh) is given, the returned
        result carries alignment diagnostics of the w_hh estimate against it;
        diagnostics never feed back into the update.
        """
        loss, hs, logits = self.rnn.forward_loss(inputs, targets)
        if self.tracker is not None:
            flat = hs[:, 1:].reshape(-1, self.rnn.hidden_dim)
            self.tracker.submit(flat)
            self.tracker.process_pending()
        dirs = self._directions()
        up = self._loss_with_offset(inputs, targets, dirs, self.epsilon_wp)
        down = self._loss_with_offset(inputs, targets, dirs, -self.epsilon_wp)
        coeff = (up - down) / (2.0 * self.epsilon_wp)
        estimates = {name: coeff * d for name, d in dirs.items()}

        cos = proj = float("nan")
        if true_grad is not None:
            est = estimates["w_hh"].ravel()
            tg = np.asarray(true_grad).ravel()
            nt = np.linalg.norm(tg)
            ne = np.linalg.norm(est)
            if nt > 0 and ne > 0:
                cos = float(est @ tg / (ne * nt))
                proj = float(est @ tg / (nt * nt))

        names = list(self._params)
        nets.sgd_momentum_step(
            [self._params[n] for n in names],
            [estimates[n] for n in names],
            self.lr,
            self.momentum,
            [self._velocity[n] for n in names],
        )
        ro = self.rnn.readout_grads(hs, logits, targets)
        nets.sgd_momentum_step(
            self._readout_params, [ro["w_hy"], ro["b_y"]],
            self.lr, self.momentum, self._readout_velocity,
        )
        return WpStepResult(loss=loss, estimate_cos=cos, estimate_proj=proj)
