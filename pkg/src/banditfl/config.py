"""Experiment configuration: a flat INI file with section headers.

Every key has a default, the parsed config is fully explicit, and
``dump_config`` -> ``parse_config`` is an exact round trip, so the echoed
copy written next to each run's outputs re-creates the run byte for byte.
Unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace

from .allocator import AllocatorConfig
from .data import DirichletSpec, IidSpec, PartitionSpec, ShardsSpec
from .engine import AggregationStrategy, FedAvg, FedMaba, QFfl
from .errors import ConfigError
from .models import MlpSpec, ModelSpec, SoftmaxRegressionSpec

OUTPUT_ROOT_ENV = "BANDITFL_OUTPUT_ROOT"
STRATEGY_NAMES = ("fedavg", "fedmaba", "qffl", "fedprox")


@dataclass(frozen=True)
class ExperimentConfig:
    # [dataset]
    dataset_kind: str = "synthetic"
    n_clients: int = 20
    n_classes: int = 10
    n_features: int = 7
    samples_per_client: int = 500
    class_separation: float = 3.0
    client_test_mode: str = "matched"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # [partition]
    partition_kind: str = "shards"
    shards_per_client: int = 2
    dirichlet_alpha: float = 0.5
    # [model]
    model_kind: str = "softmax"
    hidden_width: int = 64
    # [federation]
    rounds: int = 300
    participation_fraction: float = 1.0
    client_lr: float = 0.1
    client_lr_decay: float = 0.999
    local_steps: int = 10
    batch_size: int = 50
    eval_every: int = 10
    loss_clip: float | None = None
    # [strategy]
    strategies: tuple[str, ...] = ("fedmaba", "fedavg")
    alpha: float = 0.5
    eta_b: float = 0.5
    rho: float = 1.0
    eta_s: float = 1.0
    qffl_q: float = 0.1
    prox_mu: float = 0.1
    lambda_max_initial: float = 1.0
    lambda_tolerance: float = 1e-6
    max_bracket_doublings: int = 60
    # [run]
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = ""


_SECTIONS: dict[str, tuple[str, ...]] = {
    "dataset": (
        "dataset_kind",
        "n_clients",
        "n_classes",
        "n_features",
        "samples_per_client",
        "class_separation",
        "client_test_mode",
        "train_images",
        "train_labels",
        "test_images",
        "test_labels",
    ),
    "partition": ("partition_kind", "shards_per_client", "dirichlet_alpha"),
    "model": ("model_kind", "hidden_width"),
    "federation": (
        "rounds",
        "participation_fraction",
        "client_lr",
        "client_lr_decay",
        "local_steps",
        "batch_size",
        "eval_every",
        "loss_clip",
    ),
    "strategy": (
        "strategies",
        "alpha",
        "eta_b",
        "rho",
        "eta_s",
        "qffl_q",
        "prox_mu",
        "lambda_max_initial",
        "lambda_tolerance",
        "max_bracket_doublings",
    ),
    "run": ("seeds", "output_dir"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_KEY_TO_SECTION = {key: sec for sec, keys in _SECTIONS.items() for key in keys}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[key]
    try:
        if key == "strategies":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if key == "seeds":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if key == "loss_clip":
            return None if raw.lower() in ("", "none", "off") else float(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r} ({exc})") from exc


def _format(key: str, value) -> str:
    if key in ("strategies", "seeds"):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def validate_config(cfg: ExperimentConfig) -> None:
    def fail(msg: str) -> None:
        raise ConfigError(msg)

    if cfg.dataset_kind not in ("synthetic", "idx"):
        fail(f"dataset_kind must be 'synthetic' or 'idx', got {cfg.dataset_kind!r}")
    if cfg.dataset_kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                fail(f"dataset_kind 'idx' requires '{key}'")
    if cfg.client_test_mode not in ("matched", "global"):
        fail(f"client_test_mode must be 'matched' or 'global', got {cfg.client_test_mode!r}")
    if cfg.partition_kind not in ("shards", "dirichlet", "iid"):
        fail(f"partition_kind must be one of shards/dirichlet/iid, got {cfg.partition_kind!r}")
    if cfg.model_kind not in ("softmax", "mlp2"):
        fail(f"model_kind must be 'softmax' or 'mlp2', got {cfg.model_kind!r}")
    for key in ("n_clients", "n_classes", "n_features", "samples_per_client",
                "shards_per_client", "hidden_width", "rounds", "local_steps",
                "batch_size", "eval_every", "max_bracket_doublings"):
        if getattr(cfg, key) < 1:
            fail(f"'{key}' must be at least 1, got {getattr(cfg, key)}")
    if cfg.dirichlet_alpha <= 0.0:
        fail(f"'dirichlet_alpha' must be positive, got {cfg.dirichlet_alpha}")
    if not 0.0 < cfg.participation_fraction <= 1.0:
        fail(f"'participation_fraction' must lie in (0, 1], got {cfg.participation_fraction}")
    for key in ("client_lr", "client_lr_decay", "eta_b", "eta_s",
                "lambda_max_initial", "lambda_tolerance"):
        if getattr(cfg, key) <= 0.0:
            fail(f"'{key}' must be positive, got {getattr(cfg, key)}")
    if cfg.loss_clip is not None and cfg.loss_clip <= 0.0:
        fail(f"'loss_clip' must be positive or none, got {cfg.loss_clip}")
    if not 0.0 <= cfg.alpha <= 1.0:
        fail(f"'alpha' must lie in [0, 1], got {cfg.alpha}")
    if cfg.rho < 0.0:
        fail(f"'rho' must be nonnegative, got {cfg.rho}")
    if cfg.qffl_q < 0.0:
        fail(f"'qffl_q' must be nonnegative, got {cfg.qffl_q}")
    if cfg.prox_mu < 0.0:
        fail(f"'prox_mu' must be nonnegative, got {cfg.prox_mu}")
    if not cfg.strategies:
        fail("'strategies' must name at least one strategy")
    for name in cfg.strategies:
        if name not in STRATEGY_NAMES:
            fail(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")
    if len(set(cfg.strategies)) != len(cfg.strategies):
        fail("'strategies' must not repeat entries")
    if not cfg.seeds:
        fail("'seeds' must name at least one seed")
    if any(s < 0 for s in cfg.seeds):
        fail("'seeds' must be nonnegative")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        fail("'seeds' must not repeat entries")
    if not cfg.output_dir:
        fail("'output_dir' must be resolved before validation")


def parse_config(
    path=None, text: str | None = None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    """Build a fully resolved config from an INI file/text plus flag overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    source = ""
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                source = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    elif text is not None:
        source = text
    try:
        parser.read_string(source)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc

    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _KEY_TO_SECTION:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, raw)

    cfg = replace(ExperimentConfig(), **values)
    if not cfg.output_dir:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg = replace(cfg, output_dir=os.path.join(root, "run"))
    validate_config(cfg)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text with every key explicit (the self-describing echo)."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format(key, getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def model_spec_from(cfg: ExperimentConfig, n_features: int | None = None) -> ModelSpec:
    """Model spec for the run; pass n_features for file-loaded datasets."""
    width = n_features if n_features is not None else cfg.n_features
    if cfg.model_kind == "softmax":
        return SoftmaxRegressionSpec(width, cfg.n_classes)
    return MlpSpec(width, cfg.hidden_width, cfg.n_classes)


def partition_spec_from(cfg: ExperimentConfig) -> PartitionSpec:
    if cfg.partition_kind == "shards":
        return ShardsSpec(cfg.shards_per_client)
    if cfg.partition_kind == "dirichlet":
        return DirichletSpec(cfg.dirichlet_alpha)
    return IidSpec()


def allocator_config_from(cfg: ExperimentConfig) -> AllocatorConfig:
    return AllocatorConfig(
        eta_b=cfg.eta_b,
        rho=cfg.rho,
        lambda_max_initial=cfg.lambda_max_initial,
        lambda_tolerance=cfg.lambda_tolerance,
        max_bracket_doublings=cfg.max_bracket_doublings,
    )


def fairness_benchmark_config(output_dir: str) -> ExperimentConfig:
    """The shipped fairness benchmark: 20 shard-partitioned clients, softmax
    regression, 300 rounds, 3 seeds, bandit allocation (alpha 0.8, eta_b 0.5,
    rho 1.0) against plain averaging."""
    return replace(
        ExperimentConfig(),
        strategies=("fedmaba", "fedavg"),
        alpha=0.8,
        eta_b=0.5,
        rho=1.0,
        output_dir=output_dir,
    )


def build_strategy(name: str, cfg: ExperimentConfig) -> AggregationStrategy:
    if name == "fedavg":
        return FedAvg(eta_s=cfg.eta_s)
    if name == "fedprox":
        return FedAvg(eta_s=cfg.eta_s, prox_mu=cfg.prox_mu)
    if name == "qffl":
        return QFfl(q=cfg.qffl_q, eta_s=cfg.eta_s)
    if name == "fedmaba":
        return FedMaba(alpha=cfg.alpha, allocator=allocator_config_from(cfg), eta_s=cfg.eta_s)
    raise ConfigError(f"unknown strategy {name!r}")
