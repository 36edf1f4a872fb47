"""Experiment execution: seed sweeps, per-seed artifact directories, CSVs.

Every artifact is a CSV written with repr-formatted floats, so a rerun of the
same (config, seed) reproduces files byte for byte. Seeds run as independent
jobs; MC_THREADS bounds how many run concurrently.
"""

import copy
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__, analysis, wp
from ..credit import RuleConfig, Trainer, evaluate_accuracy
from ..manifold import (
    jacobian_variance_curve,
    pcs_for_variance,
    twonn_estimate,
    variance_explained_curve,
)
from ..nets import Network, Rnn, image_classifier_specs, sgd_momentum_step, zero_velocity
from ..numerics import spawn_rngs
from .config import ConfigError, config_hash, default_pcs, serialize_config, validate_config
from .data import load_image_dataset
from .memory import MemoryTaskSpec, generate_memory_batch


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_manifest(cfg, seed, seed_dir):
    text = (
        f"config_hash = {config_hash(cfg)}\n"
        f"seed = {seed}\n"
        f"version = manifoldnc-{__version__}\n\n"
        f"{serialize_config(cfg)}"
    )
    Path(seed_dir, "manifest.txt").write_text(text, encoding="utf-8")


def _dataset_for(cfg):
    streams = spawn_rngs(cfg.dataset_seed, ["synthetic-data"])
    return load_image_dataset(
        cfg.data_path,
        cfg.data_format,
        num_classes=cfg.num_classes,
        train_size=cfg.train_size,
        test_size=cfg.test_size,
        cluster_std=cfg.cluster_std,
        rng=streams["synthetic-data"],
        modes=cfg.cluster_modes,
    )


def _build_trainer(cfg, seed):
    streams = spawn_rngs(seed, ["net-init", "feedback-init", "noise", "pca-init", "shuffle"])
    net = Network(
        image_classifier_specs(cfg.width_multiplier, cfg.num_classes),
        (3, 32, 32),
        streams["net-init"],
    )
    pcs = cfg.pcs if cfg.pcs else default_pcs(cfg)
    pcs = [min(d, n) for d, n in zip(pcs, net.flat_dims)]
    rule_cfg = RuleConfig(
        rule=cfg.rule,
        eta_b=cfg.eta_b,
        update_interval=cfg.update_interval,
        sigma=cfg.sigma,
        pcs=pcs,
        init=cfg.init,
        mirror_decay=cfg.mirror_decay,
        mirror_noise=cfg.mirror_noise,
        per_example_noise=cfg.per_example_noise,
        same_minibatch=cfg.same_minibatch,
    )
    trainer = Trainer(
        net,
        rule_cfg,
        cfg.lr,
        cfg.momentum,
        rng_feedback=streams["feedback-init"],
        rng_noise=streams["noise"],
        rng_pca=streams["pca-init"],
    )
    return net, trainer, streams


def _manifold_curves(net, inputs, jac_inputs=4):
    """Per-hidden-layer cumulative variance curves of activations, plus the
    Jacobian mass captured by the leading activation PCs."""
    cache = net.forward(inputs)
    rows = []
    for l in net.hidden_indices:
        acts = cache.post_flat(l)
        curve = variance_explained_curve(acts)
        k = min(len(curve), 128)
        jac = np.concatenate(
            [net.jacobian(inputs[i : i + 1], l) for i in range(min(jac_inputs, len(inputs)))]
        )
        centered = acts - acts.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        jcurve = jacobian_variance_curve(jac, vt[:k].T)
        for idx in range(k):
            rows.append((l, idx + 1, float(curve[idx]), float(jcurve[idx])))
    return rows


def run_image_seed(cfg, seed, seed_dir):
    data = _dataset_for(cfg)
    net, trainer, streams = _build_trainer(cfg, seed)
    probe = data.test_x[: min(64, len(data.test_x))]
    probe_y = data.test_y[: len(probe)]
    metric_rows = []
    align_rows = []
    for epoch in range(1, cfg.epochs + 1):
        metrics = trainer.train_epoch(data.train_x, data.train_y, cfg.batch_size, streams["shuffle"])
        acc = evaluate_accuracy(net, data.test_x, data.test_y)
        fb = ";".join(str(c) for c in metrics.feedback_updates) or "0"
        metric_rows.append((epoch, cfg.rule, float(acc), float(metrics.train_loss), fb))
        if cfg.record_alignment:
            for rec in analysis.gradient_alignment_records(net, trainer, probe, probe_y, epoch):
                align_rows.append(
                    (
                        rec.epoch,
                        rec.layer,
                        rec.space,
                        float(rec.angle_deg),
                        float(rec.proj_mag),
                        float(rec.pseudo_norm),
                        float(rec.true_norm),
                        cfg.rule,
                        seed,
                    )
                )
    write_csv(
        Path(seed_dir, "metrics.csv"),
        ["epoch", "rule", "test_accuracy", "train_loss", "feedback_updates"],
        metric_rows,
    )
    if cfg.record_alignment:
        write_csv(
            Path(seed_dir, "alignment.csv"),
            [
                "epoch",
                "layer",
                "space",
                "angle_deg",
                "proj_mag",
                "pseudo_norm",
                "true_norm",
                "rule",
                "seed",
            ],
            align_rows,
        )
    curve_rows = _manifold_curves(net, probe)
    write_csv(
        Path(seed_dir, "manifold_curves.csv"),
        ["layer", "pc_index", "cumulative_fraction", "jacobian_cumulative_fraction"],
        curve_rows,
    )
    return {"best_accuracy": max(r[2] for r in metric_rows)}


def run_rnn_seed(cfg, seed, seed_dir):
    spec = MemoryTaskSpec(gap=cfg.memory_gap, symbols=cfg.memory_symbols, alphabet=cfg.memory_alphabet)
    streams = spawn_rngs(seed, ["net-init", "noise", "pca-init", "data", "eval-data"])
    rnn = Rnn(spec.alphabet, cfg.rnn_hidden, spec.alphabet, streams["net-init"])
    eval_inputs, eval_targets = generate_memory_batch(spec, cfg.rnn_batch_size, streams["eval-data"])
    rows = []
    if cfg.wp_family == "backprop":
        params = [rnn.w_xh, rnn.w_hh, rnn.b_h, rnn.w_hy, rnn.b_y]
        velocity = zero_velocity(params)
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for _ in range(cfg.rnn_batches_per_epoch):
                inputs, targets = generate_memory_batch(spec, cfg.rnn_batch_size, streams["data"])
                loss, grads = rnn.backprop(inputs, targets)
                sgd_momentum_step(
                    params,
                    [grads["w_xh"], grads["w_hh"], grads["b_h"], grads["w_hy"], grads["b_y"]],
                    cfg.backprop_lr,
                    cfg.momentum,
                    velocity,
                )
                losses.append(loss)
            eval_loss, _, logits = rnn.forward_loss(eval_inputs, eval_targets)
            rows.append(
                (
                    epoch,
                    "backprop",
                    float(np.mean(losses)),
                    float(eval_loss),
                    _payload_accuracy(spec, logits, eval_targets),
                    float("nan"),
                    float("nan"),
                )
            )
    else:
        trainer = wp.WpTrainer(
            rnn,
            cfg.wp_family,
            cfg.wp_lr,
            cfg.momentum,
            rng_noise=streams["noise"],
            rng_pca=streams["pca-init"],
            epsilon_wp=cfg.epsilon_wp,
            subspace_dim=min(cfg.wp_pcs, cfg.rnn_hidden),
        )
        for epoch in range(1, cfg.epochs + 1):
            losses, coss, projs = [], [], []
            for _ in range(cfg.rnn_batches_per_epoch):
                inputs, targets = generate_memory_batch(spec, cfg.rnn_batch_size, streams["data"])
                _, true_grads = rnn.backprop(inputs, targets)
                step = trainer.train_batch(inputs, targets, true_grad=true_grads["w_hh"])
                losses.append(step.loss)
                coss.append(step.estimate_cos)
                projs.append(step.estimate_proj)
            eval_loss, _, logits = rnn.forward_loss(eval_inputs, eval_targets)
            rows.append(
                (
                    epoch,
                    cfg.wp_family,
                    float(np.mean(losses)),
                    float(eval_loss),
                    _payload_accuracy(spec, logits, eval_targets),
                    float(np.nanmean(coss)),
                    float(np.nanmean(projs)),
                )
            )
    write_csv(
        Path(seed_dir, "metrics.csv"),
        ["epoch", "family", "train_loss", "eval_loss", "payload_accuracy", "cos_whh", "proj_whh"],
        rows,
    )
    return {"final_eval_loss": rows[-1][3]}


def _payload_accuracy(spec, logits, targets):
    start = spec.symbols + spec.gap
    pred = logits[:, start:].argmax(axis=-1)
    return float((pred == targets[:, start:]).mean())


def run_theory_seed(cfg, seed, seed_dir):
    streams = spawn_rngs(seed, ["mse", "isotropy", "cos2", "eq8", "fixed-point"])
    trials = cfg.theory_trials

    mse_rows = []
    for family in ("full", "rank1-iid"):
        for (n, m) in ((2, 2), (4, 4), (8, 4)):
            for k in (1, 4, 16):
                g = streams["mse"].standard_normal((n, m))
                predicted = wp.mse_closed_form(family, n, m, k)
                empirical = wp.mse_oracle(family, g, k, trials, streams["mse"])
                mse_rows.append(
                    (family, n, m, k, float(predicted), float(empirical),
                     float(abs(empirical - predicted) / predicted))
                )
    write_csv(
        Path(seed_dir, "wp_mse.csv"),
        ["family", "N", "M", "K", "predicted", "empirical", "rel_error"],
        mse_rows,
    )

    iso_rows = []
    for family, rank in (("full", 1), ("rank1-iid", 1), ("rank-r", 2), ("rank-r", 4)):
        err = isotropy_error(family, 4, 4, streams["isotropy"], trials, rank=rank)
        iso_rows.append((family, rank, 16, float(err)))
    write_csv(
        Path(seed_dir, "isotropy.csv"),
        ["family", "rank", "dim", "frobenius_rel_error"],
        iso_rows,
    )

    cos_rows = []
    for (n, d) in ((16, 4), (64, 8), (256, 16)):
        for alpha in (0.5, 0.9):
            for k in [k for k in (1, 2, 4, 8, 16) if k <= d]:
                for method in ("nmnc", "vnc"):
                    pred = analysis.predicted_cos2(method, k, n=n, d=d, alpha=alpha)
                    emp = analysis.empirical_cos2(method, k, n, d, alpha, trials, streams["cos2"])
                    cos_rows.append(
                        (method, n, d, alpha, k, float(pred), float(emp),
                         float(abs(emp - pred) / pred))
                    )
    write_csv(
        Path(seed_dir, "cos2.csv"),
        ["method", "n", "d", "alpha", "k", "predicted", "empirical", "rel_error"],
        cos_rows,
    )

    eq8_rows = []
    n = 16
    rng8 = streams["eq8"]
    g = rng8.standard_normal(n)
    q, _ = np.linalg.qr(rng8.standard_normal((n, 4)))
    a = rng8.standard_normal((n, n))
    covs = {
        "identity": np.eye(n),
        "scaled-projector": 2.5 * (q @ q.T),
        "random-psd": a @ a.T / n,
    }
    for name, cov in covs.items():
        for k in (1, 4, 16):
            emp, pred = analysis.noise_variance_identity_check(cov, g, k, trials, rng8)
            eq8_rows.append((name, k, float(pred), float(emp), float(abs(emp - pred) / pred)))
    write_csv(
        Path(seed_dir, "eq8.csv"),
        ["covariance", "k", "predicted", "empirical", "rel_error"],
        eq8_rows,
    )

    ratio_rows = []
    for (n, d, alpha) in ((32, 4, 0.5), (64, 8, 0.9)):
        pred = analysis.predicted_norm_ratio(n, d, alpha)
        emp = fixed_point_norm_ratio(n, d, alpha, streams["fixed-point"], updates=2000)
        ratio_rows.append((n, d, alpha, float(pred.norm), float(emp), float(abs(emp - pred.norm) / pred.norm)))
    write_csv(
        Path(seed_dir, "norm_ratio.csv"),
        ["n", "d", "alpha", "predicted", "empirical", "rel_error"],
        ratio_rows,
    )
    return {}


def isotropy_error(family, rows, cols, rng, draws, rank=1, chunk=4096):
    """Frobenius relative error of the empirical vectorized second moment
    against the identity, before any norm rescaling."""
    dim = rows * cols
    acc = np.zeros((dim, dim))
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        if family == "full":
            e = rng.standard_normal((m, rows, cols))
        elif family == "rank1-iid":
            e = rng.standard_normal((m, rows, 1)) * rng.standard_normal((m, 1, cols))
        elif family == "rank-r":
            u = rng.standard_normal((m, rows, rank))
            v = rng.standard_normal((m, cols, rank))
            e = np.einsum("mir,mjr->mij", u, v) / np.sqrt(rank)
        else:
            raise ValueError(f"isotropy check undefined for family {family!r}")
        vecs = e.reshape(m, dim)
        acc += vecs.T @ vecs
        done += m
    second_moment = acc / draws
    return float(np.linalg.norm(second_moment - np.eye(dim)) / np.linalg.norm(np.eye(dim)))


def fixed_point_norm_ratio(n, d, alpha, rng, updates=2000, n_out=6, batch=32, eta_b=0.01):
    """Small frozen-linear-layer fixed point: run the noise-correlation EMA
    with manifold and isotropic noise at matched energy and compare the
    resulting pseudo-gradient norms against the closed-form ratio."""
    from ..credit import feedback_update, matched_sigma_vnc, sample_noise

    jac = rng.standard_normal((n_out, n))
    basis, _ = np.linalg.qr(rng.standard_normal((n, d)))
    delta = rng.standard_normal(n_out)
    g = jac.T @ delta
    # place the requested energy fraction inside the basis span
    par = basis @ (basis.T @ g)
    perp = g - par
    if np.linalg.norm(par) == 0 or np.linalg.norm(perp) == 0:
        raise ValueError("degenerate test geometry")
    g = np.sqrt(alpha) * par / np.linalg.norm(par) + np.sqrt(1 - alpha) * perp / np.linalg.norm(perp)
    jac = np.outer(delta, g) / (delta @ delta)  # linear net with J^T delta = g exactly
    sigma_v = matched_sigma_vnc(d, n, 1.0)
    fb = {"nmnc": np.zeros((n, n_out)), "vnc": np.zeros((n, n_out))}
    for _ in range(updates):
        for method in ("nmnc", "vnc"):
            draw = sample_noise(
                method,
                batch,
                1.0 if method == "nmnc" else sigma_v,
                rng,
                components=basis if method == "nmnc" else None,
                ambient_dim=n,
            )
            dy = draw.xi @ jac.T
            fb[method] = feedback_update(fb[method], draw.xi, dy, eta_b)
    num = np.linalg.norm(fb["nmnc"] @ delta)
    den = np.linalg.norm(fb["vnc"] @ delta)
    return float(num / den)


def run_dim_seed(cfg, seed, seed_dir):
    rows = []
    for width in cfg.dim_widths:
        sub = copy.deepcopy(cfg)
        sub.width_multiplier = width
        sub.rule = "backprop"
        data = _dataset_for(sub)
        net, trainer, streams = _build_trainer(sub, seed)
        for _ in range(cfg.dim_epochs):
            trainer.train_epoch(data.train_x, data.train_y, sub.batch_size, streams["shuffle"])
        sample = data.train_x[: min(cfg.dim_samples, len(data.train_x))]
        cache = net.forward(sample)
        for l in net.hidden_indices:
            acts = np.unique(cache.post_flat(l), axis=0)
            if len(acts) < 10:
                continue
            est = twonn_estimate(acts)
            curve = variance_explained_curve(acts)
            rows.append(
                (float(width), l, net.flat_dims[l], float(est), pcs_for_variance(curve, 0.9))
            )
    write_csv(
        Path(seed_dir, "dimensions.csv"),
        ["width_multiplier", "layer", "flat_dim", "twonn", "pcs_90"],
        rows,
    )
    return {}


_TASK_RUNNERS = {
    "image-classify": run_image_seed,
    "rnn-memory": run_rnn_seed,
    "theory-validate": run_theory_seed,
    "dim-estimate": run_dim_seed,
}


def run_experiment(cfg):
    """Run every seed of the configured task; returns per-seed summaries.

    Raises ConfigError for bad configs and RuntimeError if any seed failed
    (after running the rest)."""
    validate_config(cfg)
    runner = _TASK_RUNNERS[cfg.task]
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    def one_seed(seed):
        seed_dir = out_root / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(cfg, seed, seed_dir)
        return runner(cfg, seed, seed_dir)

    max_workers = max(1, int(os.environ.get("MC_THREADS", "1")))
    results, failures = {}, {}
    if max_workers == 1 or len(cfg.seeds) == 1:
        for seed in cfg.seeds:
            try:
                results[seed] = one_seed(seed)
            except Exception:
                failures[seed] = traceback.format_exc()
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futs = {seed: pool.submit(one_seed, seed) for seed in cfg.seeds}
            for seed, fut in futs.items():
                try:
                    results[seed] = fut.result()
                except Exception:
                    failures[seed] = traceback.format_exc()
    if failures:
        report = out_root / "failures.txt"
        report.write_text(
            "\n\n".join(f"seed {s}:\n{tb}" for s, tb in failures.items()), encoding="utf-8"
        )
        raise RuntimeError(
            f"{len(failures)} of {len(cfg.seeds)} seeds failed; see {report}"
        )
    return results
