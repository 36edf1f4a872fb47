import numpy as np
import pytest

from manifoldnc import nets, numerics, wp
from manifoldnc.harness.memory import MemoryTaskSpec, generate_memory_batch
from manifoldnc.harness.runner import isotropy_error


def test_rank1_draw_has_rank_one():
    rng = numerics.make_rng(0)
    e = wp.draw_direction("rank1-iid", 6, 9, rng)
    assert np.linalg.matrix_rank(e) == 1


def test_rankr_draw_rank_bounded():
    rng = numerics.make_rng(1)
    e = wp.draw_direction("rank-r", 8, 8, rng, rank=3)
    assert np.linalg.matrix_rank(e) <= 3


def test_rescaled_norm_exact():
    rng = numerics.make_rng(2)
    spec = wp.PerturbationSpec("rank1-iid", rows=7, cols=5, epsilon_wp=1e-4)
    e = wp.draw_perturbation(spec, rng)
    target = 1e-4 * np.sqrt(35)
    assert abs(np.linalg.norm(e) - target) < 1e-12 * target


@pytest.mark.parametrize(
    "family,rank", [("full", 1), ("rank1-iid", 1), ("rank-r", 2), ("rank-r", 4)]
)
def test_prerescale_isotropy(family, rank):
    rng = numerics.make_rng(3)
    err = isotropy_error(family, 4, 4, rng, 100_000, rank=rank)
    assert err < 0.05, (family, rank, err)


def test_subspace_family_row_factor_in_span():
    rng = numerics.make_rng(4)
    basis, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    e = wp.draw_direction("rank1-fixed-subspace", 10, 6, rng, basis=basis)
    resid = e - basis @ (basis.T @ e)
    assert np.abs(resid).max() < 1e-10


def test_subspace_family_requires_basis():
    rng = numerics.make_rng(5)
    with pytest.raises(ValueError, match="basis"):
        wp.draw_direction("rank1-manifold", 4, 4, rng)


def test_antithetic_linear_loss_exact():
    rng = numerics.make_rng(6)
    g = rng.standard_normal((4, 3))
    e = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 3))

    def loss(m):
        return float((g * m).sum())

    for eps in (1.0, 0.1, 1e-6):
        est = wp.antithetic_estimate(loss, w, e, eps)
        assert np.allclose(est, (g * e).sum() * e, atol=1e-6 * np.abs(est).max())


def test_antithetic_orthogonal_direction_gives_zero():
    g = np.zeros((2, 2))
    g[0, 0] = 1.0
    e = np.zeros((2, 2))
    e[1, 1] = 1.0

    def loss(m):
        return float((g * m).sum())

    est = wp.antithetic_estimate(loss, np.zeros((2, 2)), e, 0.5)
    assert np.all(est == 0.0)


def test_antithetic_unbiased_on_linear_loss():
    rng = numerics.make_rng(7)
    g = rng.standard_normal((3, 3))

    def loss(m):
        return float((g * m).sum())

    total = np.zeros_like(g)
    sq = 0.0
    trials = 100_000
    for _ in range(trials):
        e = rng.standard_normal((3, 3))
        est = wp.antithetic_estimate(loss, np.zeros((3, 3)), e, 1e-3)
        total += est
        sq += float((est * est).sum())
    mean = total / trials
    # per-entry standard error bound from the pooled second moment
    se = np.sqrt(sq / trials) / np.sqrt(trials)
    assert np.linalg.norm(mean - g) < 3 * se * 3  # 3 sigma with dim slack


def test_mse_closed_form_values():
    assert wp.mse_closed_form("full", 2, 2, 1) == 5.0
    assert wp.mse_closed_form("rank1-iid", 2, 2, 1) == 15.0
    assert wp.mse_closed_form("full", 2, 2, 10_000) == pytest.approx(0.0, abs=1e-3)
    assert wp.mse_closed_form("rank1-manifold", 2, 2, 1) is None
    assert wp.mse_closed_form("rank-r", 2, 2, 1) is None


def test_mse_oracle_matches_closed_form_spot_checks():
    rng = numerics.make_rng(8)
    g = rng.standard_normal((4, 4))
    emp = wp.mse_oracle("full", g, 4, 10_000, numerics.make_rng(9))
    assert abs(emp - 17 / 4) / (17 / 4) < 0.05
    g2 = rng.standard_normal((2, 2))
    emp2 = wp.mse_oracle("rank1-iid", g2, 1, 10_000, numerics.make_rng(12))
    assert abs(emp2 - 15.0) / 15.0 < 0.05


def test_mse_scaling_slope_in_dimension():
    # both families scale as d = N*M at leading order: empirical log-log
    # slopes track the closed-form slopes, which approach 1 from below
    dims = [4, 8, 16]
    for family in ("full", "rank1-iid"):
        emp, closed = [], []
        for n in dims:
            g = numerics.make_rng(n).standard_normal((n, n))
            emp.append(wp.mse_oracle(family, g, 1, 20_000, numerics.make_rng(50 + n)))
            closed.append(wp.mse_closed_form(family, n, n, 1))
        for e, c in zip(emp, closed):
            assert abs(e - c) / c < 0.1
        x = np.log([n * n for n in dims])
        slope_emp = np.polyfit(x, np.log(emp), 1)[0]
        slope_closed = np.polyfit(x, np.log(closed), 1)[0]
        assert abs(slope_emp - slope_closed) < 0.1
        assert 0.7 < slope_emp < 1.1


def test_wp_trainer_reduces_loss_full_family():
    spec = MemoryTaskSpec(0, 3, 4)
    losses_first, losses_last = [], []
    for seed in range(2):
        streams = numerics.spawn_rngs(seed, ["net", "noise", "pca", "data"])
        rnn = nets.Rnn(spec.alphabet, 24, spec.alphabet, streams["net"])
        tr = wp.WpTrainer(rnn, "full", 3e-4, 0.9, streams["noise"], streams["pca"])
        losses = []
        for _ in range(200):
            inputs, targets = generate_memory_batch(spec, 128, streams["data"])
            losses.append(tr.train_batch(inputs, targets).loss)
        losses_first.append(np.mean(losses[:20]))
        losses_last.append(np.mean(losses[-20:]))
    assert np.mean(losses_last) < np.mean(losses_first)


def test_wp_trainer_manifold_tracks_hidden_states():
    spec = MemoryTaskSpec(0, 3, 4)
    streams = numerics.spawn_rngs(3, ["net", "noise", "pca", "data"])
    rnn = nets.Rnn(spec.alphabet, 16, spec.alphabet, streams["net"])
    tr = wp.WpTrainer(rnn, "rank1-manifold", 1e-4, 0.9, streams["noise"], streams["pca"],
                      subspace_dim=8)
    for _ in range(5):
        inputs, targets = generate_memory_batch(spec, 64, streams["data"])
        tr.train_batch(inputs, targets)
    assert tr.tracker.updates_applied == 5
    comps = tr.tracker.components()
    assert comps.shape == (16, 8)


def test_wp_trainer_alignment_diagnostics():
    spec = MemoryTaskSpec(0, 3, 4)
    streams = numerics.spawn_rngs(4, ["net", "noise", "pca", "data"])
    rnn = nets.Rnn(spec.alphabet, 16, spec.alphabet, streams["net"])
    tr = wp.WpTrainer(rnn, "rank1-iid", 1e-4, 0.9, streams["noise"], streams["pca"])
    inputs, targets = generate_memory_batch(spec, 64, streams["data"])
    _, grads = rnn.backprop(inputs, targets)
    res = tr.train_batch(inputs, targets, true_grad=grads["w_hh"])
    assert -1.0 <= res.estimate_cos <= 1.0
    assert np.isfinite(res.estimate_proj)


def test_default_probe_scale():
    spec = wp.PerturbationSpec("full", 4, 4)
    assert spec.epsilon_wp == 1e-4
