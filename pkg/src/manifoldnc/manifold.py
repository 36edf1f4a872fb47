"""Online estimation of low-dimensional activity structure.

Incremental PCA follows the augmented-SVD scheme: each batch is merged by
stacking the previous components (scaled by their singular values), the
centered batch, and a mean-correction row, then taking an exact SVD of the
stack. TwoNN estimates intrinsic dimension from the ratio of second- to
first-nearest-neighbor distances.
"""

import logging
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import numerics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifoldState:
    """Immutable snapshot of the streaming PCA of one activation stream.

    `components` is ambient_dim x num_components with orthonormal columns
    (random unit-norm columns before the first update).
    """

    mean: np.ndarray
    variance: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    count: int

    @property
    def ambient_dim(self):
        return self.components.shape[0]

    @property
    def num_components(self):
        return self.components.shape[1]


def init_manifold(ambient_dim, num_components, rng):
    if not 1 <= num_components <= ambient_dim:
        raise ValueError(
            f"need 1 <= num_components <= ambient_dim, got {num_components} vs {ambient_dim}"
        )
    q, _ = np.linalg.qr(rng.standard_normal((ambient_dim, num_components)))
    return ManifoldState(
        mean=np.zeros(ambient_dim),
        variance=np.zeros(ambient_dim),
        components=q,
        singular_values=np.zeros(num_components),
        count=0,
    )


def ipca_update(state, batch):
    """Merge one (b, n) batch of observations into the PCA state.

    Requires b >= num_components. Batches containing non-finite values are
    dropped with a diagnostic, returning the state unchanged.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != state.ambient_dim:
        raise ValueError(f"batch must be (b, {state.ambient_dim}), got {batch.shape}")
    b = batch.shape[0]
    k = state.num_components
    if b < k:
        raise ValueError(f"batch size {b} is smaller than the component count {k}")
    if not np.all(np.isfinite(batch)):
        logger.warning("dropping PCA batch with non-finite activations")
        return state

    m = state.count
    total = m + b
    batch_mean = batch.mean(axis=0)
    new_mean = (m * state.mean + b * batch_mean) / total
    centered = batch - batch_mean
    batch_ssq = (centered * centered).sum(axis=0)
    old_ssq = state.variance * m
    shift = state.mean - batch_mean
    new_var = (old_ssq + batch_ssq + (m * b / total) * shift * shift) / total

    if m == 0:
        stack = centered
    else:
        correction = np.sqrt(m * b / total) * shift
        stack = np.vstack(
            [state.singular_values[:, None] * state.components.T, centered, correction[None, :]]
        )
    _, svals, v = numerics.svd(stack)
    return ManifoldState(
        mean=new_mean,
        variance=new_var,
        components=v[:, :k],
        singular_values=svals[:k],
        count=total,
    )


def ipca_components(state):
    """Snapshot of the current principal axes (a copy, safe to hand out)."""
    return state.components.copy()


def subspace_angle(u1, u2):
    """Largest principal angle between two column spaces, in radians.

    Uses the sine-based residual form, which stays accurate for tiny angles
    where arccos of a singular value saturates.
    """
    q1, _ = np.linalg.qr(np.asarray(u1, dtype=np.float64))
    q2, _ = np.linalg.qr(np.asarray(u2, dtype=np.float64))
    if q1.shape[1] < q2.shape[1]:
        q1, q2 = q2, q1
    resid = q2 - q1 @ (q1.T @ q2)
    s = np.linalg.svd(resid, compute_uv=False)
    return float(np.arcsin(np.clip(s[0], 0.0, 1.0)))


def twonn_estimate(points, trim_fraction=0.1):
    """TwoNN intrinsic dimension of a point cloud.

    For each point, mu = r2/r1 (distances to its two nearest neighbors).
    Sorted mu values satisfy -log(1 - F(mu)) = d log(mu); d is fit by least
    squares through the origin after discarding the top and bottom
    `trim_fraction` of the sorted ratios. Neighbor search is exact brute
    force, which is the point: this is an oracle, not a fast estimator.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if m < 10:
        raise ValueError(f"need at least 10 points, got {m}")
    if not 0 <= trim_fraction < 0.5:
        raise ValueError(f"trim_fraction must be in [0, 0.5), got {trim_fraction}")
    dist = squareform(pdist(points))
    np.fill_diagonal(dist, np.inf)
    two = np.partition(dist, 1, axis=1)[:, :2]
    r1 = two[:, 0]
    r2 = two[:, 1]
    if np.any(r1 == 0.0):
        raise ValueError("duplicate points: nearest-neighbor distance is zero")
    mu = np.sort(r2 / r1)
    cdf = (np.arange(1, m + 1) - 0.5) / m
    lo = int(np.floor(m * trim_fraction))
    hi = m - lo
    x = np.log(mu[lo:hi])
    y = -np.log1p(-cdf[lo:hi])
    return float((x @ y) / (x @ x))


def variance_explained_curve(activations):
    """Cumulative fraction of activation variance per principal component."""
    x = np.asarray(activations, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    centered = x - x.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    ev = svals * svals
    total = ev.sum()
    if total == 0.0:
        return np.zeros(len(ev))
    return np.cumsum(ev) / total


def pcs_for_variance(curve, threshold=0.9):
    """Number of leading components needed to reach a cumulative fraction."""
    hits = np.flatnonzero(curve >= threshold - 1e-12)
    return int(hits[0]) + 1 if hits.size else len(curve)


def jacobian_variance_curve(jac_rows, components):
    """Fraction of squared Jacobian mass captured by the leading activation
    PCs, cumulative in the number of components used."""
    j = np.asarray(jac_rows, dtype=np.float64)
    u = np.asarray(components, dtype=np.float64)
    total = (j * j).sum()
    if total == 0.0:
        return np.zeros(u.shape[1])
    proj = j @ u
    return np.cumsum((proj * proj).sum(axis=0)) / total


class ManifoldTracker:
    """Single-writer incremental PCA behind a bounded submission queue.

    Activation batches are submitted without blocking; when the queue is
    full they are dropped, bounding memory and staleness. Because each SVD
    merge needs at least as many rows as retained components, drained
    batches accumulate in a staging buffer and an update fires once the
    buffer holds num_components rows or more. `components()` returns an
    immutable snapshot, so readers may be arbitrarily stale but never see a
    half-written basis. With `start_worker()` a daemon thread drains the
    queue; by default the owner drains it explicitly via `process_pending()`,
    which keeps runs bit-reproducible.
    """

    def __init__(self, ambient_dim, num_components, rng, queue_capacity=4):
        self._state = init_manifold(ambient_dim, num_components, rng)
        self._queue = deque()
        self._staged = []
        self._staged_rows = 0
        self._capacity = queue_capacity
        self._lock = threading.Lock()
        self._wakeup = threading.Condition(self._lock)
        self._worker = None
        self._stop = False
        self.dropped = 0
        self.updates_applied = 0

    def submit(self, batch):
        """Queue a batch for the next update; returns False if it was dropped."""
        with self._wakeup:
            if len(self._queue) >= self._capacity:
                self.dropped += 1
                return False
            self._queue.append(np.array(batch, dtype=np.float64))
            self._wakeup.notify()
            return True

    def _pop(self):
        with self._lock:
            return self._queue.popleft() if self._queue else None

    def _stage_and_maybe_update(self, batch):
        self._staged.append(batch)
        self._staged_rows += batch.shape[0]
        if self._staged_rows < self._state.num_components:
            return
        block = self._staged[0] if len(self._staged) == 1 else np.vstack(self._staged)
        self._staged = []
        self._staged_rows = 0
        new_state = ipca_update(self._state, block)
        with self._lock:
            self._state = new_state
            self.updates_applied += 1

    def process_pending(self):
        """Drain the queue now (writer only)."""
        while True:
            batch = self._pop()
            if batch is None:
                return
            self._stage_and_maybe_update(batch)

    def components(self):
        with self._lock:
            state = self._state
        return ipca_components(state)

    def state(self):
        with self._lock:
            return self._state

    def start_worker(self):
        if self._worker is not None:
            return
        self._stop = False

        def loop():
            while True:
                with self._wakeup:
                    while not self._queue and not self._stop:
                        self._wakeup.wait()
                    if self._stop and not self._queue:
                        return
                    batch = self._queue.popleft()
                self._stage_and_maybe_update(batch)

        self._worker = threading.Thread(target=loop, daemon=True)
        self._worker.start()

    def stop_worker(self):
        if self._worker is None:
            return
        with self._wakeup:
            self._stop = True
            self._wakeup.notify_all()
        self._worker.join()
        self._worker = None
