"""Flat key=value experiment configuration with section headers.

The on-disk format is INI-like and diffable; parse(serialize(cfg)) == cfg
holds exactly because floats are written with repr (shortest round-trip
form) and lists as comma-joined scalars.
"""

import dataclasses
import hashlib
from configparser import ConfigParser
from dataclasses import dataclass, field
from io import StringIO

TASKS = ("image-classify", "rnn-memory", "theory-validate", "dim-estimate")


class ConfigError(Exception):
    """Bad configuration: maps to CLI exit code 1."""


@dataclass
class ExperimentConfig:
    # experiment
    task: str = "image-classify"
    seeds: list = field(default_factory=lambda: [0])
    epochs: int = 20
    batch_size: int = 64
    out_dir: str = "runs/out"
    # network
    width_multiplier: float = 0.125
    num_classes: int = 10
    # rule
    rule: str = "nmnc"
    lr: float = 0.001
    momentum: float = 0.9
    eta_b: float = 0.001
    update_interval: int = 5
    sigma: float = 1.0
    pcs: list = field(default_factory=list)
    init: str = "permuted-initjac"
    mirror_decay: float = 0.5
    mirror_noise: str = "vnc"
    per_example_noise: bool = True
    same_minibatch: bool = True
    record_alignment: bool = False
    # data
    data_format: str = "synthetic"
    data_path: str = ""
    train_size: int = 3200
    test_size: int = 800
    cluster_std: float = 1.0
    cluster_modes: int = 1
    dataset_seed: int = 1234
    # rnn
    rnn_hidden: int = 64
    memory_gap: int = 0
    memory_symbols: int = 5
    memory_alphabet: int = 5
    rnn_batch_size: int = 256
    rnn_batches_per_epoch: int = 20
    wp_family: str = "rank1-manifold"
    wp_lr: float = 0.0001
    backprop_lr: float = 0.001
    epsilon_wp: float = 0.0001
    wp_pcs: int = 32
    # theory
    theory_trials: int = 10000
    # dim-estimate
    dim_widths: list = field(default_factory=lambda: [0.125, 0.25, 0.5])
    dim_samples: int = 2000
    dim_epochs: int = 2


_SECTIONS = {
    "experiment": ["task", "seeds", "epochs", "batch_size", "out_dir"],
    "network": ["width_multiplier", "num_classes"],
    "rule": [
        "rule",
        "lr",
        "momentum",
        "eta_b",
        "update_interval",
        "sigma",
        "pcs",
        "init",
        "mirror_decay",
        "mirror_noise",
        "per_example_noise",
        "same_minibatch",
        "record_alignment",
    ],
    "data": ["data_format", "data_path", "train_size", "test_size", "cluster_std", "cluster_modes", "dataset_seed"],
    "rnn": [
        "rnn_hidden",
        "memory_gap",
        "memory_symbols",
        "memory_alphabet",
        "rnn_batch_size",
        "rnn_batches_per_epoch",
        "wp_family",
        "wp_lr",
        "backprop_lr",
        "epsilon_wp",
        "wp_pcs",
    ],
    "theory": ["theory_trials"],
    "dim": ["dim_widths", "dim_samples", "dim_epochs"],
}

_LIST_ELEM = {"seeds": int, "pcs": int, "dim_widths": float}
_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _format_value(name, value):
    if name in _LIST_ELEM:
        return ",".join(_format_scalar(v) for v in value)
    return _format_scalar(value)


def _format_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, text):
    f = _FIELDS[name]
    text = text.strip()
    if name in _LIST_ELEM:
        if not text:
            return []
        elem = _LIST_ELEM[name]
        try:
            return [elem(part.strip()) for part in text.split(",")]
        except ValueError as err:
            raise ConfigError(f"bad list value for {name}: {text!r}") from err
    if f.type is bool or isinstance(f.default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {name}: {text!r}")
    try:
        if f.type is int or isinstance(f.default, int):
            return int(text)
        if f.type is float or isinstance(f.default, float):
            return float(text)
    except ValueError as err:
        raise ConfigError(f"bad value for {name}: {text!r}") from err
    return text


def serialize_config(cfg):
    lines = []
    for section, names in _SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {_format_value(name, getattr(cfg, name))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text):
    parser = ConfigParser()
    try:
        parser.read_string(text)
    except Exception as err:
        raise ConfigError(f"unparseable config: {err}") from err
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(cfg, key, _parse_value(key, raw))
    validate_config(cfg)
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def validate_config(cfg):
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}, expected one of {TASKS}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if cfg.rule not in ("backprop", "nmnc", "vnc", "dfa", "mirror"):
        raise ConfigError(f"unknown rule {cfg.rule!r}")
    if cfg.data_format not in ("synthetic", "cifar10-binary"):
        raise ConfigError(f"unknown data format {cfg.data_format!r}")
    if cfg.memory_alphabet < 3:
        raise ConfigError("memory_alphabet must be >= 3")
    if cfg.wp_family not in (
        "full",
        "rank1-iid",
        "rank1-fixed-subspace",
        "rank1-manifold",
        "rank-r",
        "backprop",
    ):
        raise ConfigError(f"unknown wp_family {cfg.wp_family!r}")
    return cfg


def default_pcs(cfg):
    """Retained components per hidden layer, scaled with network width.

    Full width keeps [512, 512, 512, 128]; reduced widths scale in
    proportion (never below 1, never above the layer's flat dimension).
    """
    base = [512, 512, 512, 128]
    return [max(1, round(b * cfg.width_multiplier)) for b in base]


def config_hash(cfg):
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]
