"""Observer-side comparison of pseudo-gradients against true gradients.

Everything here is read-only over snapshots: alignment is computed for
analysis and never feeds back into training. The closed-form expressions for
expected squared cosine and norm ratios are paired with Monte-Carlo oracles
that measure the true expectations they approximate.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np


def cosine_angle(pseudo, true):
    """Angle between two flattened gradients, in degrees; nan if either is zero."""
    a = np.asarray(pseudo, dtype=np.float64).ravel()
    b = np.asarray(true, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    c = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def projected_magnitude(pseudo, true):
    """Signed length of the pseudo-gradient along the true gradient direction,
    in units of the true gradient's norm: <g~, g> / ||g||^2."""
    a = np.asarray(pseudo, dtype=np.float64).ravel()
    b = np.asarray(true, dtype=np.float64).ravel()
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return float("nan")
    return float(a @ b / (nb * nb))


def alpha_fraction(components, grad):
    """Fraction of gradient energy inside the span of the components:
    ||U^T g||^2 / ||g||^2."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    g2 = g @ g
    if g2 == 0.0:
        raise ValueError("gradient must be nonzero")
    proj = components.T @ g
    return float(proj @ proj / g2)


def predicted_cos2(method, k, n=None, d=None, alpha=None):
    """Closed-form expected squared cosine between pseudo- and true gradient
    after k noise-correlation samples.

    vnc: k / (k + n + 1). nmnc: alpha * k / (k + d + 1). These are large-n /
    large-d approximations; `empirical_cos2` measures the exact expectation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if method == "vnc":
        if n is None:
            raise ValueError("vnc prediction needs n")
        return k / (k + n + 1)
    if method == "nmnc":
        if d is None or alpha is None:
            raise ValueError("nmnc prediction needs d and alpha")
        return alpha * k / (k + d + 1)
    raise ValueError(f"unknown method {method!r}")


def cos2_limit(method, alpha=None):
    """k -> infinity asymptote: 1 for vnc, alpha for nmnc."""
    if method == "vnc":
        return 1.0
    if method == "nmnc":
        if alpha is None:
            raise ValueError("nmnc asymptote needs alpha")
        return alpha
    raise ValueError(f"unknown method {method!r}")


def _alpha_vector(n, d, alpha):
    """Unit vector with exactly `alpha` of its energy in the first d coords."""
    g = np.zeros(n)
    g[0] = np.sqrt(alpha)
    if alpha < 1.0:
        if d >= n:
            raise ValueError("alpha < 1 requires d < n")
        g[d] = np.sqrt(1.0 - alpha)
    return g


def empirical_cos2(method, k, n, d, alpha, trials, rng, chunk=2048):
    """Monte-Carlo mean of cos^2 between (empirical covariance of k draws) g
    and g, with g placed so that exactly `alpha` of its energy lies in the
    d-dimensional noise span. The sampling basis is taken as the first d
    coordinates, which is no loss of generality by rotational symmetry."""
    if not 1 <= d <= n:
        raise ValueError(f"need 1 <= d <= n, got d={d} n={n}")
    g = _alpha_vector(n, d, alpha)
    total = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        if method == "nmnc":
            xi = np.zeros((m, k, n))
            xi[:, :, :d] = rng.standard_normal((m, k, d))
        elif method == "vnc":
            xi = rng.standard_normal((m, k, n))
        else:
            raise ValueError(f"unknown method {method!r}")
        proj = xi @ g
        g_tilde = np.einsum("mk,mkn->mn", proj, xi) / k
        num = g_tilde @ g
        den = np.linalg.norm(g_tilde, axis=1)
        c = np.divide(num, den, out=np.zeros(m), where=den > 0)
        total += float((c * c).sum())
        done += m
    return total / trials


PredictedRatios = namedtuple("PredictedRatios", ["norm", "projected"])


def predicted_norm_ratio(n, d, alpha):
    """Converged pseudo-gradient size of the manifold rule relative to the
    isotropic rule at matched noise energy: (n/d) sqrt(alpha) for the norm
    ratio, (n/d) alpha for the ratio of components along the true gradient."""
    if n < 1 or d < 1 or alpha < 0:
        raise ValueError("n, d must be positive and alpha non-negative")
    return PredictedRatios(norm=(n / d) * np.sqrt(alpha), projected=(n / d) * alpha)


def noise_variance_identity_check(sigma_mat, g, k, trials, rng, chunk=2048):
    """Fourth-moment identity for Gaussian noise with covariance S:
    E||(S_hat - S) g||^2 = (1/k) [tr(S) g'Sg + g'S^2g].

    Returns (empirical, predicted). S must be symmetric PSD; draws use its
    matrix square root, so singular S (projectors) are fine.
    """
    s = np.asarray(sigma_mat, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64).ravel()
    n = g.shape[0]
    if s.shape != (n, n) or not np.allclose(s, s.T, atol=1e-12):
        raise ValueError("covariance must be symmetric and match g's dimension")
    evals, evecs = np.linalg.eigh(s)
    if evals.min() < -1e-10:
        raise ValueError("covariance must be positive semidefinite")
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    predicted = (np.trace(s) * (g @ s @ g) + g @ (s @ s) @ g) / k
    sg = s @ g
    total = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        z = rng.standard_normal((m, k, n))
        xi = z @ root.T
        proj = xi @ g
        eta = np.einsum("mk,mkn->mn", proj, xi) / k - sg
        total += float(np.einsum("mn,mn->m", eta, eta).sum())
        done += m
    return total / trials, float(predicted)


@dataclass(frozen=True)
class AlignmentRecord:
    epoch: int
    layer: int
    space: str  # "activation" or "weight"
    angle_deg: float
    proj_mag: float
    pseudo_norm: float
    true_norm: float


def _record(epoch, layer, space, pseudo, true):
    return AlignmentRecord(
        epoch=epoch,
        layer=layer,
        space=space,
        angle_deg=cosine_angle(pseudo, true),
        proj_mag=projected_magnitude(pseudo, true),
        pseudo_norm=float(np.linalg.norm(np.ravel(pseudo))),
        true_norm=float(np.linalg.norm(np.ravel(true))),
    )


def gradient_alignment_records(net, trainer, x, targets, epoch=0, spaces=("activation", "weight")):
    """Per-layer alignment of the current rule's pseudo-gradients against the
    exact gradients on one batch, in activation space (feedback output vs
    dL/dx_l) and weight space (resulting weight update vs exact dL/dW_l).

    Pure observation: operates on the trainer's current state and touches
    nothing.
    """
    cache = net.forward(x)
    bp = net.backprop(x, targets, cache=cache)
    records = []
    if trainer.feedback.rule == "backprop":
        pseudo_deltas = None
    else:
        pseudo_deltas = trainer.pseudo_deltas(cache, bp.delta_out)
    for l in net.hidden_indices:
        if pseudo_deltas is None:
            if "activation" in spaces:
                records.append(_record(epoch, l, "activation", bp.act_grads[l], bp.act_grads[l]))
            if "weight" in spaces:
                records.append(_record(epoch, l, "weight", bp.weight_grads[l], bp.weight_grads[l]))
            continue
        if "activation" in spaces and trainer.feedback.rule != "mirror":
            i = net.hidden_indices.index(l)
            pseudo_act = bp.delta_out @ trainer.feedback.matrices[i].T
            records.append(_record(epoch, l, "activation", pseudo_act, bp.act_grads[l]))
        if "weight" in spaces:
            dw, _ = net.weight_grads_from_delta(cache, l, pseudo_deltas[l])
            records.append(_record(epoch, l, "weight", dw, bp.weight_grads[l]))
    return records
