import numpy as np
import pytest

from manifoldnc import numerics


def test_svd_identity():
    u, s, v = numerics.svd(np.eye(3))
    assert np.allclose(s, [1.0, 1.0, 1.0])
    assert np.allclose(u @ np.diag(s) @ v.T, np.eye(3), atol=1e-12)


def test_svd_diagonal_values():
    _, s, _ = numerics.svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(s, [3.0, 2.0, 1.0])


def test_svd_reconstruction_random():
    rng = numerics.make_rng(11)
    a = rng.standard_normal((8, 5))
    u, s, v = numerics.svd(a)
    err = np.linalg.norm(a - u @ np.diag(s) @ v.T) / np.linalg.norm(a)
    assert err < 1e-10


@pytest.mark.parametrize("shape", [(4, 4), (8, 5), (5, 8), (20, 3)])
def test_svd_orthonormality_and_order(shape):
    rng = numerics.make_rng(sum(shape))
    a = rng.standard_normal(shape)
    u, s, v = numerics.svd(a)
    k = min(shape)
    assert np.abs(u.T @ u - np.eye(k)).max() < 1e-10
    assert np.abs(v.T @ v - np.eye(k)).max() < 1e-10
    assert np.all(np.diff(s) <= 1e-12)
    assert np.all(s >= 0)


def test_svd_sign_convention():
    rng = numerics.make_rng(3)
    a = rng.standard_normal((7, 4))
    _, _, v = numerics.svd(a)
    for j in range(v.shape[1]):
        assert v[np.argmax(np.abs(v[:, j])), j] > 0


def test_svd_rejects_nonfinite():
    a = np.ones((2, 2))
    a[0, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        numerics.svd(a)


def test_gaussian_matrix_moments():
    rng = numerics.make_rng(0)
    m = numerics.gaussian_matrix(rng, 1000, 1000, 1.0)
    assert 0.995 < m.var() < 1.005
    assert abs(m.mean()) < 0.005


def test_gaussian_matrix_rejects_bad_sigma():
    rng = numerics.make_rng(0)
    with pytest.raises(ValueError):
        numerics.gaussian_matrix(rng, 2, 2, 0.0)
    with pytest.raises(ValueError):
        numerics.gaussian_matrix(rng, 2, 2, -1.0)


def test_gaussian_matrix_seed_determinism():
    a = numerics.gaussian_matrix(numerics.make_rng(42), 5, 7, 2.0)
    b = numerics.gaussian_matrix(numerics.make_rng(42), 5, 7, 2.0)
    assert np.array_equal(a, b)


def test_spawn_rngs_independent_and_stable():
    s1 = numerics.spawn_rngs(9, ["a", "b"])
    s2 = numerics.spawn_rngs(9, ["a", "b"])
    assert np.array_equal(s1["a"].standard_normal(4), s2["a"].standard_normal(4))
    assert not np.array_equal(
        numerics.spawn_rngs(9, ["a", "b"])["a"].standard_normal(4),
        numerics.spawn_rngs(9, ["a", "b"])["b"].standard_normal(4),
    )


def test_finite_diff_quadratic_exact():
    rng = numerics.make_rng(5)
    w = rng.standard_normal((3, 4))
    grad = numerics.finite_diff_gradient(lambda m: float((m * m).sum()), w, 1e-6)
    assert np.allclose(grad, 2 * w, atol=1e-7)


def test_finite_diff_linear_exact():
    rng = numerics.make_rng(6)
    a = rng.standard_normal((3, 3))
    w = rng.standard_normal((3, 3))
    grad = numerics.finite_diff_gradient(lambda m: float((a * m).sum()), w, 1e-5)
    assert np.allclose(grad, a, atol=1e-9)


def test_finite_diff_rejects_nonfinite_objective():
    w = np.zeros((2, 2))
    with pytest.raises(ValueError, match="non-finite"):
        numerics.finite_diff_gradient(lambda m: float("nan"), w, 1e-5)
