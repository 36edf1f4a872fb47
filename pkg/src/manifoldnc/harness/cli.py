"""Command-line interface.

Subcommands map one-to-one onto the experiment tasks: `train` runs the
image-classification comparison for one rule, `rnn-wp` the recurrent
weight-perturbation task, `validate-theory` the closed-form checks,
`estimate-dim` the width sweep, `analyze-alignment` a training run with
gradient-alignment recording forced on, and `plot-data` re-exports per-figure
CSVs from a finished run directory.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

import sys
from pathlib import Path

import click

from . import runner
from .config import ConfigError, ExperimentConfig, load_config, validate_config

RULES = ("backprop", "nmnc", "vnc", "dfa", "mirror")
FAMILIES = ("backprop", "full", "rank1-iid", "rank1-fixed-subspace", "rank1-manifold", "rank-r")


def _parse_seeds(seed, seeds):
    if seeds:
        if ".." in seeds:
            lo, hi = seeds.split("..", 1)
            try:
                return list(range(int(lo), int(hi) + 1))
            except ValueError as err:
                raise ConfigError(f"bad seed range {seeds!r}") from err
        try:
            return [int(part) for part in seeds.split(",")]
        except ValueError as err:
            raise ConfigError(f"bad seed list {seeds!r}") from err
    if seed is not None:
        return [seed]
    return None


def _load(config_path):
    if config_path:
        return load_config(config_path)
    return ExperimentConfig()


def _apply_common(cfg, task, seed, seeds, out, b, pcs, sigma, epochs):
    cfg.task = task
    parsed = _parse_seeds(seed, seeds)
    if parsed is not None:
        cfg.seeds = parsed
    if out:
        cfg.out_dir = out
    if b is not None:
        cfg.update_interval = b
    if pcs:
        try:
            cfg.pcs = [int(p) for p in pcs.split(",")]
        except ValueError as err:
            raise ConfigError(f"bad --pcs value {pcs!r}") from err
    if sigma is not None:
        cfg.sigma = sigma
    if epochs is not None:
        cfg.epochs = epochs
    return cfg


def _execute(cfg):
    try:
        validate_config(cfg)
        runner.run_experiment(cfg)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    except Exception as err:  # noqa: BLE001 - any runtime failure is exit 2
        click.echo(f"runtime failure: {err}", err=True)
        sys.exit(2)
    click.echo(f"artifacts written under {cfg.out_dir}")


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Experiment config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Single seed.")(fn)
    fn = click.option("--seeds", type=str, default=None,
                      help="Seed sweep, N..M or comma list.")(fn)
    fn = click.option("--out", type=str, default=None, help="Output directory.")(fn)
    fn = click.option("--b", type=int, default=None,
                      help="Feedback update interval in batches.")(fn)
    fn = click.option("--pcs", type=str, default=None,
                      help="Retained components per hidden layer, comma list.")(fn)
    fn = click.option("--sigma", type=float, default=None,
                      help="Manifold noise scale (isotropic scale is matched).")(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    return fn


@click.group()
def main():
    """Manifold noise correlation experiments."""


@main.command()
@_common_options
@click.option("--rule", type=click.Choice(RULES), default=None)
def train(config_path, seed, seeds, out, b, pcs, sigma, epochs, rule):
    """Train the image classifier with one credit-assignment rule."""
    try:
        cfg = _load(config_path)
        if rule:
            cfg.rule = rule
        _apply_common(cfg, "image-classify", seed, seeds, out, b, pcs, sigma, epochs)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    _execute(cfg)


@main.command("rnn-wp")
@_common_options
@click.option("--family", type=click.Choice(FAMILIES), default=None)
def rnn_wp(config_path, seed, seeds, out, b, pcs, sigma, epochs, family):
    """Train the memory-task RNN with a weight-perturbation family."""
    try:
        cfg = _load(config_path)
        if family:
            cfg.wp_family = family
        _apply_common(cfg, "rnn-memory", seed, seeds, out, b, pcs, sigma, epochs)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    _execute(cfg)


@main.command("validate-theory")
@_common_options
@click.option("--trials", type=int, default=None, help="Monte-Carlo trials per check.")
def validate_theory(config_path, seed, seeds, out, b, pcs, sigma, epochs, trials):
    """Check closed-form alignment/variance predictions against oracles."""
    try:
        cfg = _load(config_path)
        if trials is not None:
            cfg.theory_trials = trials
        _apply_common(cfg, "theory-validate", seed, seeds, out, b, pcs, sigma, epochs)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    _execute(cfg)


@main.command("estimate-dim")
@_common_options
@click.option("--widths", type=str, default=None, help="Width multipliers, comma list.")
def estimate_dim(config_path, seed, seeds, out, b, pcs, sigma, epochs, widths):
    """Intrinsic-dimension estimates across a network width sweep."""
    try:
        cfg = _load(config_path)
        if widths:
            cfg.dim_widths = [float(w) for w in widths.split(",")]
        _apply_common(cfg, "dim-estimate", seed, seeds, out, b, pcs, sigma, epochs)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    _execute(cfg)


@main.command("analyze-alignment")
@_common_options
@click.option("--rule", type=click.Choice(RULES), default=None)
def analyze_alignment(config_path, seed, seeds, out, b, pcs, sigma, epochs, rule):
    """Training run with per-epoch gradient-alignment recording."""
    try:
        cfg = _load(config_path)
        if rule:
            cfg.rule = rule
        cfg.record_alignment = True
        _apply_common(cfg, "image-classify", seed, seeds, out, b, pcs, sigma, epochs)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(1)
    _execute(cfg)


@main.command("plot-data")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True,
              help="Finished experiment directory.")
@click.option("--out", type=str, default=None, help="Where to write figure CSVs.")
def plot_data(run_dir, out):
    """Collect per-seed CSVs into tidy per-figure files."""
    run = Path(run_dir)
    out_dir = Path(out) if out else run / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = 0
    for name, target in (
        ("metrics.csv", "fig_metrics.csv"),
        ("alignment.csv", "fig_alignment.csv"),
        ("manifold_curves.csv", "fig_variance_curves.csv"),
        ("dimensions.csv", "fig_dim_scaling.csv"),
        ("cos2.csv", "fig_cos2.csv"),
        ("wp_mse.csv", "fig_wp_mse.csv"),
    ):
        rows, header = [], None
        for seed_dir in sorted(run.glob("seed_*")):
            src = seed_dir / name
            if not src.exists():
                continue
            lines = src.read_text(encoding="utf-8").strip().splitlines()
            if header is None:
                header = "seed," + lines[0]
            seed = seed_dir.name.split("_", 1)[1]
            rows.extend(f"{seed},{line}" for line in lines[1:])
        if header and rows:
            (out_dir / target).write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
            wrote += 1
    if wrote == 0:
        click.echo("no per-seed CSVs found under the run directory", err=True)
        sys.exit(2)
    click.echo(f"wrote {wrote} figure CSVs under {out_dir}")


if __name__ == "__main__":
    main()
