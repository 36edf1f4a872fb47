import numpy as np
import pytest

from manifoldnc import credit, nets, numerics
from manifoldnc.credit import RuleConfig, Trainer


def tiny_relu_net(seed=0):
    rng = numerics.make_rng(seed)
    specs = [nets.dense(12, 10), nets.dense(10, 8), nets.output_dense(8, 4)]
    return nets.Network(specs, (12,), rng)


def frozen_linear_layer(n, n_out, rng):
    """Single linear map standing in for a frozen net: dy = J xi."""
    return rng.standard_normal((n_out, n))


def make_trainer(net, rule, seed=0, **kw):
    cfg = RuleConfig(rule=rule, pcs=kw.pop("pcs", [net.flat_dims[l] // 2 for l in net.hidden_indices]), **kw)
    streams = numerics.spawn_rngs(1000 + seed, ["fb", "noise", "pca", "shuffle"])
    tr = Trainer(net, cfg, 0.01, 0.9, streams["fb"], streams["noise"], streams["pca"])
    return tr, streams


def test_matched_sigma_reference_value():
    assert np.isclose(credit.matched_sigma_vnc(512, 16384, 1.0), np.sqrt(1 / 32))
    assert np.isclose(credit.matched_sigma_vnc(512, 16384, 1.0), 0.17678, atol=1e-5)


def test_matched_sigma_full_space_and_errors():
    assert credit.matched_sigma_vnc(7, 7, 1.3) == 1.3
    with pytest.raises(ValueError):
        credit.matched_sigma_vnc(8, 7, 1.0)


def test_noise_energy_matching_monte_carlo():
    rng = numerics.make_rng(1)
    n, d = 64, 8
    basis, _ = np.linalg.qr(rng.standard_normal((n, d)))
    sigma = 1.0
    sigma_v = credit.matched_sigma_vnc(d, n, sigma)
    nmnc = credit.sample_noise("nmnc", 100_000, sigma, rng, components=basis)
    vnc = credit.sample_noise("vnc", 100_000, sigma_v, rng, ambient_dim=n)
    e_n = (nmnc.xi**2).sum(axis=1).mean()
    e_v = (vnc.xi**2).sum(axis=1).mean()
    assert abs(e_n - e_v) / e_v < 0.01


def test_nmnc_draw_lies_in_span():
    rng = numerics.make_rng(2)
    basis, _ = np.linalg.qr(rng.standard_normal((20, 4)))
    draw = credit.sample_noise("nmnc", 16, 1.0, rng, components=basis)
    resid = draw.xi - (draw.xi @ basis) @ basis.T
    assert np.abs(resid).max() < 1e-10
    assert np.allclose(draw.xi, draw.zeta @ basis.T)


def test_nmnc_empirical_covariance_is_projected():
    rng = numerics.make_rng(3)
    n, d = 12, 3
    basis, _ = np.linalg.qr(rng.standard_normal((n, d)))
    sigma = 0.7
    draw = credit.sample_noise("nmnc", 100_000, sigma, rng, components=basis)
    cov = draw.xi.T @ draw.xi / draw.xi.shape[0]
    target = sigma**2 * basis @ basis.T
    assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.05


def test_vnc_empirical_covariance_is_isotropic():
    rng = numerics.make_rng(4)
    n = 12
    sigma = 0.5
    draw = credit.sample_noise("vnc", 100_000, sigma, rng, ambient_dim=n)
    cov = draw.xi.T @ draw.xi / draw.xi.shape[0]
    target = sigma**2 * np.eye(n)
    assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.05


def test_sample_noise_requires_basis():
    with pytest.raises(ValueError, match="basis"):
        credit.sample_noise("nmnc", 4, 1.0, numerics.make_rng(0))


def test_feedback_update_endpoints():
    rng = numerics.make_rng(5)
    fb = rng.standard_normal((6, 3))
    xi = rng.standard_normal((1, 6))
    dy = rng.standard_normal((1, 3))
    assert np.array_equal(credit.feedback_update(fb, xi, dy, 0.0), fb)
    assert np.allclose(credit.feedback_update(fb, xi, dy, 1.0), xi.T @ dy)


def test_feedback_fixed_point_frozen_linear():
    # EMA over many batches converges to Sigma J^T for both noise methods
    rng = numerics.make_rng(6)
    n, d, n_out = 16, 4, 5
    jac = frozen_linear_layer(n, n_out, rng)
    basis, _ = np.linalg.qr(rng.standard_normal((n, d)))
    sigma = 1.0
    sigma_v = credit.matched_sigma_vnc(d, n, sigma)
    for method, target in (
        ("nmnc", sigma**2 * basis @ basis.T @ jac.T),
        ("vnc", sigma_v**2 * jac.T),
    ):
        fb = np.zeros((n, n_out))
        for _ in range(10_000):
            draw = credit.sample_noise(
                method, 16, sigma if method == "nmnc" else sigma_v, rng,
                components=basis if method == "nmnc" else None, ambient_dim=n,
            )
            fb = credit.feedback_update(fb, draw.xi, draw.xi @ jac.T, 0.002)
        rel = np.linalg.norm(fb - target) / np.linalg.norm(target)
        assert rel < 0.05, (method, rel)


def test_pseudo_error_identity_and_relu_gate():
    rng = numerics.make_rng(7)
    fb = rng.standard_normal((6, 3))
    d_out = rng.standard_normal((4, 3))
    s = rng.standard_normal((4, 6))
    assert np.allclose(credit.pseudo_error(fb, d_out, s, "identity"), d_out @ fb.T)
    assert np.all(credit.pseudo_error(fb, d_out, -np.abs(s), "relu") == 0.0)


def test_pseudo_error_with_transposed_jacobian_recovers_gradient():
    # linear net, so feedback equal to J^T reproduces the exact gradient
    specs = [nets.dense(6, 5, activation="identity"), nets.output_dense(5, 3)]
    lin = nets.Network(specs, (6,), numerics.make_rng(9))
    x = numerics.make_rng(10).standard_normal((3, 6))
    y = np.array([0, 2, 1])
    bp = lin.backprop(x, y)
    jac = lin.jacobian(x[:1], 0)
    delta = credit.pseudo_error(jac.T, bp.delta_out, lin.forward(x).pre[0], "identity")
    assert np.allclose(delta, bp.act_grads[0], atol=1e-12)


def test_forward_weight_update_matches_backprop_and_sums():
    net = tiny_relu_net(seed=11)
    rng = numerics.make_rng(12)
    x = rng.standard_normal((5, 12))
    y = rng.integers(0, 4, size=5)
    cache = net.forward(x)
    bp = net.backprop(x, y, cache=cache)
    deriv = nets.ACTIVATIONS["relu"][1]
    delta0 = bp.act_grads[0] * deriv(cache.pre[0])
    dw = credit.forward_weight_update(delta0, x)
    assert np.allclose(dw, bp.weight_grads[0], atol=1e-12)
    assert np.all(credit.forward_weight_update(np.zeros_like(delta0), x) == 0.0)
    per_example = sum(
        np.outer(delta0[i], x[i]) for i in range(5)
    )
    assert np.allclose(dw, per_example, atol=1e-12)


def test_init_jacobian_feedback_linear_net_exact():
    specs = [nets.dense(6, 5, activation="identity"), nets.output_dense(5, 3)]
    lin = nets.Network(specs, (6,), numerics.make_rng(13))
    mats = credit.init_jacobian_feedback(lin, numerics.make_rng(14))
    assert np.allclose(mats[0], lin.layers[1].weight.T, atol=1e-12)


def test_init_jacobian_permuted_preserves_multiset():
    net = tiny_relu_net(seed=15)
    plain = credit.init_jacobian_feedback(net, numerics.make_rng(16))
    perm = credit.init_jacobian_feedback(net, numerics.make_rng(16), permute=True)
    for a, b in zip(plain, perm):
        assert np.allclose(np.sort(a.ravel()), np.sort(b.ravel()))
        assert not np.allclose(a, b)  # astronomically unlikely to survive shuffling


def test_init_jacobian_matches_direct_average():
    net = tiny_relu_net(seed=17)
    rng = numerics.make_rng(18)
    mats = credit.init_jacobian_feedback(net, rng, batch_size=8)
    inputs = numerics.make_rng(18).standard_normal((8, 12))
    direct = np.mean([net.jacobian(inputs[i : i + 1], 0).T for i in range(8)], axis=0)
    assert np.allclose(mats[0], direct, atol=1e-12)


def test_weight_mirror_update_frozen_and_expectation():
    rng = numerics.make_rng(19)
    fb = rng.standard_normal((6, 4))
    noise = rng.standard_normal((8, 6))
    resp = rng.standard_normal((8, 4))
    assert np.array_equal(credit.weight_mirror_update(fb, noise, resp, 0.0, 0.0), fb)
    w_next = rng.standard_normal((4, 6))
    big = credit.sample_noise("vnc", 200_000, 1.0, rng, ambient_dim=6)
    est = credit.weight_mirror_update(
        np.zeros((6, 4)), big.xi, big.xi @ w_next.T, 1.0, 1.0
    )
    assert np.linalg.norm(est - w_next.T) / np.linalg.norm(w_next) < 0.05


def test_trainer_backprop_rule_matches_manual_loop():
    net_a = tiny_relu_net(seed=20)
    net_b = tiny_relu_net(seed=20)
    rng = numerics.make_rng(21)
    x = rng.standard_normal((40, 12))
    y = rng.integers(0, 4, size=40)
    tr, _ = make_trainer(net_a, "backprop", seed=0, pcs=[])
    velocity = nets.zero_velocity(net_b.parameters())
    order = numerics.make_rng(22).permutation(40)
    tr.train_epoch(x, y, 8, numerics.make_rng(22))
    for start in range(0, 40, 8):
        idx = order[start : start + 8]
        bp = net_b.backprop(x[idx], y[idx])
        grads = []
        for dw, db in zip(bp.weight_grads, bp.bias_grads):
            grads.extend([dw, db])
        nets.sgd_momentum_step(net_b.parameters(), grads, 0.01, 0.9, velocity)
    for la, lb in zip(net_a.layers, net_b.layers):
        assert np.array_equal(la.weight, lb.weight)
        assert np.array_equal(la.bias, lb.bias)


def test_trainer_dfa_feedback_constant():
    net = tiny_relu_net(seed=23)
    tr, streams = make_trainer(net, "dfa", seed=1)
    before = tr.feedback.copy_matrices()
    rng = numerics.make_rng(24)
    x = rng.standard_normal((64, 12))
    y = rng.integers(0, 4, size=64)
    for _ in range(3):
        tr.train_epoch(x, y, 8, streams["shuffle"])
    for a, b in zip(before, tr.feedback.matrices):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("interval", [1, 3, 5])
def test_trainer_gating_exact_count(interval):
    net = tiny_relu_net(seed=25)
    tr, streams = make_trainer(net, "vnc", seed=2, update_interval=interval)
    rng = numerics.make_rng(26)
    x = rng.standard_normal((72, 12))
    y = rng.integers(0, 4, size=72)
    tr.train_epoch(x, y, 8, streams["shuffle"])  # 9 batches
    expected = 9 // interval
    assert all(c == expected for c in tr.feedback.update_counts)


def test_trainer_nmnc_runs_and_updates_pca():
    net = tiny_relu_net(seed=27)
    tr, streams = make_trainer(net, "nmnc", seed=3, update_interval=2, eta_b=0.5)
    rng = numerics.make_rng(28)
    x = rng.standard_normal((48, 12))
    y = rng.integers(0, 4, size=48)
    metrics = tr.train_epoch(x, y, 8, streams["shuffle"])
    assert metrics.pca_updates == [3, 3]
    assert all(c == 3 for c in metrics.feedback_updates)
    assert np.isfinite(metrics.train_loss)


def test_trainer_mirror_rule_runs():
    net = tiny_relu_net(seed=29)
    tr, streams = make_trainer(net, "mirror", seed=4, update_interval=2, eta_b=0.2)
    rng = numerics.make_rng(30)
    x = rng.standard_normal((32, 12))
    y = rng.integers(0, 4, size=32)
    metrics = tr.train_epoch(x, y, 8, streams["shuffle"])
    assert np.isfinite(metrics.train_loss)
    assert tr.feedback.matrices[0].shape == (10, 8)
    assert tr.feedback.matrices[1].shape == (8, 4)


def test_trainer_output_layer_gets_exact_gradient():
    # for any rule, the output layer weight step equals the exact-gradient step
    net = tiny_relu_net(seed=31)
    tr, _ = make_trainer(net, "dfa", seed=5)
    rng = numerics.make_rng(32)
    x = rng.standard_normal((8, 12))
    y = rng.integers(0, 4, size=8)
    before = net.layers[-1].weight.copy()
    bp = net.backprop(x, y)
    tr.train_batch(x, y)
    after = net.layers[-1].weight
    assert np.allclose(after, before - 0.01 * bp.weight_grads[-1], atol=1e-12)
