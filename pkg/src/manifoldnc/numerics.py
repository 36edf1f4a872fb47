"""Dense float64 linear algebra, seeded RNG streams, and finite-difference oracles.

Every array in this package is a row-major float64 numpy array. Routines here
are pure functions of their inputs; the only mutable object is the RNG, which
is owned by a single caller.
"""

import numpy as np


def make_rng(seed):
    """PCG64 generator; the same seed always yields the same draw sequence."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, names):
    """Named independent substreams derived from one seed.

    Returns a dict name -> Generator. Streams are independent of each other
    and stable under insertion order of `names`.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(seq)) for name, seq in zip(names, children)}


def require_finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).ravel())[0])
        raise ValueError(f"{name} contains a non-finite entry at flat index {bad}")
    return arr


def svd(a):
    """Thin SVD with a deterministic sign convention.

    Returns (U, S, V) with a = U @ diag(S) @ V.T, S descending and
    non-negative, U and V column-orthonormal. Each column of V is oriented so
    its largest-magnitude entry is positive; U columns are flipped to match.
    """
    a = require_finite("svd input", a)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"svd expects a non-empty 2-d array, got shape {a.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, s, v * signs


def gaussian_matrix(rng, rows, cols, sigma):
    """I.i.d. N(0, sigma^2) entries."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma * rng.standard_normal((rows, cols))


def finite_diff_gradient(f, w, h):
    """Entrywise central-difference gradient of a scalar function of an array.

    Slow by design: this is the independent oracle that exact backward passes
    are checked against.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    flat_w = w.ravel()
    flat_g = grad.ravel()
    for i in range(flat_w.size):
        orig = flat_w[i]
        flat_w[i] = orig + h
        fp = f(w)
        flat_w[i] = orig - h
        fm = f(w)
        flat_w[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective returned a non-finite value near entry {i}")
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad
