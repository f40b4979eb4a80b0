"""Experiment orchestration and persistence.

A run is a grid of (strategy, seed) cells.  Each cell gets a private
subdirectory with a JSON-lines record stream, a flat CSV of the same
records, and an echo of the fully resolved config; the run root collects
one summary row per cell (the best evaluation round, matching the
best-model selection rule).  Numbers in CSV files are printed with 17
significant digits so identical configs reproduce identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .allocator import (
    AllocatorConfig,
    KlBallConstraint,
    dual_step,
    floor_weights,
    kernel_f,
    kl_to_uniform,
    update_weights,
)
from .config import (
    ExperimentConfig,
    build_strategy,
    dump_config,
    model_spec_from,
    partition_spec_from,
)
from .data import BaseDataset, assemble_federated, generate_synthetic, load_idx
from .engine import ExperimentState, RoundRecord, init_experiment, run_round
from .errors import (
    BracketFailureError,
    ConfigError,
    DataError,
    DivergenceError,
    RecordParseError,
)
from .seeding import DATA_STREAM, PARTITION_STREAM, rng_for
from .theory import bregman_projection_oracle, rademacher_estimate

_CSV_SKIP = ("wall_time", "evaluated", "per_client_test_accuracy",
             "per_client_test_loss", "per_client_train_loss", "weights")
_PLOT_SKIP = ("round", "strategy", "seed", "wall_time")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.16e}"
    return str(value)


@dataclass
class CellResult:
    strategy: str
    seed: int
    status: str
    best_record: RoundRecord | None
    final_weights: np.ndarray | None
    n_records: int


def build_base_dataset(cfg: ExperimentConfig, seed: int) -> BaseDataset:
    if cfg.dataset_kind == "synthetic":
        return generate_synthetic(
            cfg.n_clients,
            cfg.n_classes,
            cfg.n_features,
            cfg.samples_per_client,
            cfg.class_separation,
            rng_for(seed, DATA_STREAM),
        )
    features, labels = load_idx(cfg.train_images, cfg.train_labels)
    test_features, test_labels = load_idx(cfg.test_images, cfg.test_labels)
    n_classes = int(max(labels.max(), test_labels.max())) + 1
    return BaseDataset(features, labels, test_features, test_labels, n_classes)


def build_state(cfg: ExperimentConfig, strategy_name: str, seed: int) -> ExperimentState:
    base = build_base_dataset(cfg, seed)
    dataset = assemble_federated(
        base,
        partition_spec_from(cfg),
        cfg.n_clients,
        rng_for(seed, PARTITION_STREAM),
        client_test_mode=cfg.client_test_mode,
    )
    spec = model_spec_from(cfg, n_features=base.features.shape[1])
    return init_experiment(
        dataset,
        spec,
        build_strategy(strategy_name, cfg),
        seed,
        strategy_name=strategy_name,
        participation_fraction=cfg.participation_fraction,
        client_lr=cfg.client_lr,
        client_lr_decay=cfg.client_lr_decay,
        local_steps=cfg.local_steps,
        batch_size=cfg.batch_size,
        eval_every=cfg.eval_every,
        loss_clip=cfg.loss_clip,
    )


def record_to_dict(record: RoundRecord) -> dict:
    out = asdict(record)
    out["round"] = out.pop("round_index")
    return out


def _csv_header(n_clients: int) -> str:
    cols = [k if k != "round_index" else "round"
            for k in RoundRecord.__dataclass_fields__ if k not in _CSV_SKIP]
    cols += [f"client_test_acc_{i}" for i in range(n_clients)]
    cols += [f"client_test_loss_{i}" for i in range(n_clients)]
    cols += [f"client_train_loss_{i}" for i in range(n_clients)]
    cols += [f"weight_{i}" for i in range(n_clients)]
    return ",".join(cols)


def _csv_row(record: RoundRecord, n_clients: int) -> str:
    cells = [
        _fmt(getattr(record, k))
        for k in RoundRecord.__dataclass_fields__
        if k not in _CSV_SKIP
    ]
    for array in (
        record.per_client_test_accuracy,
        record.per_client_test_loss,
        record.per_client_train_loss,
        record.weights,
    ):
        values = array if array is not None else [None] * n_clients
        cells += [_fmt(v) for v in values]
    return ",".join(cells)


def run_cell(cfg: ExperimentConfig, strategy_name: str, seed: int, cell_dir: Path) -> CellResult:
    """Run one grid cell to completion, streaming records to disk."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "config.echo").write_text(dump_config(cfg), encoding="utf-8")
    state = build_state(cfg, strategy_name, seed)
    n = state.dataset.n_clients
    records: list[RoundRecord] = []
    with open(cell_dir / "records.jsonl", "w", encoding="utf-8") as jsonl, open(
        cell_dir / "records.csv", "w", encoding="utf-8"
    ) as csv:
        csv.write(_csv_header(n) + "\n")
        for _ in range(cfg.rounds):
            t = state.round_index + 1
            record = run_round(
                state, evaluate=(t % cfg.eval_every == 0) or (t == cfg.rounds)
            )
            if record.evaluated:
                jsonl.write(json.dumps(record_to_dict(record)) + "\n")
                csv.write(_csv_row(record, n) + "\n")
                records.append(record)
    best = max(records, key=lambda r: (r.global_test_accuracy, -r.round_index))
    final_weights = state.weights if strategy_name == "fedmaba" else None
    return CellResult(strategy_name, seed, "ok", best, final_weights, len(records))


_SUMMARY_COLUMNS = (
    "strategy,seed,status,best_round,global_test_accuracy,global_test_loss,"
    "fairness_variance,worst5_mean,best5_mean,final_weights"
)


def _summary_row(result: CellResult) -> str:
    best = result.best_record
    weights = (
        ";".join(_fmt(float(w)) for w in result.final_weights)
        if result.final_weights is not None
        else ""
    )
    cells = [
        result.strategy,
        str(result.seed),
        result.status.replace(",", ";"),
        str(best.round_index) if best else "",
        _fmt(best.global_test_accuracy) if best else "",
        _fmt(best.global_test_loss) if best else "",
        _fmt(best.fairness_variance) if best else "",
        _fmt(best.worst5_mean) if best else "",
        _fmt(best.best5_mean) if best else "",
        weights,
    ]
    return ",".join(cells)


def run_experiment(cfg: ExperimentConfig, report=None) -> list[CellResult]:
    """Run the whole (strategy x seed) grid; a failing cell never stops siblings."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[CellResult] = []
    for strategy_name in cfg.strategies:
        for seed in cfg.seeds:
            cell_dir = out_dir / f"{strategy_name}_seed{seed}"
            try:
                result = run_cell(cfg, strategy_name, seed, cell_dir)
            except (
                DivergenceError,
                BracketFailureError,
                ConfigError,
                DataError,
                OSError,
                ValueError,
            ) as exc:
                result = CellResult(
                    strategy_name, seed, f"failed: {exc}", None, None, 0
                )
            results.append(result)
            if report is not None:
                best = result.best_record
                detail = (
                    f"best round {best.round_index}, acc {best.global_test_accuracy:.4f}"
                    if best
                    else result.status
                )
                report(f"cell {strategy_name} seed {seed}: {detail}")
    lines = [_SUMMARY_COLUMNS] + [_summary_row(r) for r in results]
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return results


def emit_plot_data(run_dir, output_path=None) -> Path:
    """Flatten all cells' record streams into one long-format CSV.

    Columns are (round, strategy, seed, metric, value), one row per scalar
    metric, sorted by (metric, strategy, seed, round).
    """
    run_dir = Path(run_dir)
    rows: list[tuple[str, str, int, int, float]] = []
    for jsonl_path in sorted(run_dir.glob("*/records.jsonl")):
        with open(jsonl_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordParseError(f"{jsonl_path}:{lineno}: {exc}") from exc
                try:
                    rnd, strategy, seed = rec["round"], rec["strategy"], rec["seed"]
                except (KeyError, TypeError) as exc:
                    raise RecordParseError(
                        f"{jsonl_path}:{lineno}: record lacks round/strategy/seed"
                    ) from exc
                for key, value in rec.items():
                    if key in _PLOT_SKIP or isinstance(value, bool):
                        continue
                    if isinstance(value, (int, float)):
                        rows.append((key, str(strategy), int(seed), int(rnd), float(value)))
    rows.sort()
    out = Path(output_path) if output_path else run_dir / "plot_data.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("round,strategy,seed,metric,value\n")
        for metric, strategy, seed, rnd, value in rows:
            fh.write(f"{rnd},{strategy},{seed},{metric},{_fmt(value)}\n")
    return out


# ---------------------------------------------------------------------------
# Verification suites (also exercised by the acceptance tests)


def random_allocation_instance(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, AllocatorConfig]:
    """A random (weights, losses, config) triple in the oracle-checked regime."""
    n = int(rng.integers(2, 5))
    p = rng.dirichlet(np.ones(n))
    losses = rng.uniform(0.0, 3.0, size=n)
    config = AllocatorConfig(
        eta_b=float(rng.uniform(0.1, 1.0)), rho=float(rng.uniform(0.01, 1.0))
    )
    return p, losses, config


def oracle_agreement_check(n_instances: int = 200, seed: int = 20240) -> tuple[float, float]:
    """(max, median) per-entry gap between the allocator and the projection oracle."""
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n_instances):
        p, losses, config = random_allocation_instance(rng)
        new_weights, _ = update_weights(p, losses, config)
        log_q = dual_step(floor_weights(p), losses, config.eta_b)
        oracle = bregman_projection_oracle(
            log_q.values, KlBallConstraint(config.rho, p.size)
        )
        gaps.append(float(np.abs(new_weights.values - oracle.weights.values).max()))
    return float(np.max(gaps)), float(np.median(gaps))


def feasibility_check(n_calls: int = 1000, seed: int = 977) -> tuple[float, float]:
    """(worst feasibility excess, worst active-case slack) over random calls.

    Feasibility excess is kl_to_uniform(output) - rho (should be <= 1e-6);
    active-case slack is the residual when lambda* > 1e-6 (should be >= -1e-4).
    """
    rng = np.random.default_rng(seed)
    worst_excess = -math.inf
    worst_active = math.inf
    for _ in range(n_calls):
        p, losses, config = random_allocation_instance(rng)
        new_weights, lam = update_weights(p, losses, config)
        residual = kl_to_uniform(new_weights.values) - config.rho
        worst_excess = max(worst_excess, residual)
        if lam > 1e-6:
            worst_active = min(worst_active, residual)
    return worst_excess, worst_active


def kernel_monotonicity_check(n_instances: int = 200, seed: int = 4410) -> float:
    """Worst increase of the residual between two ordered multipliers (<= 1e-10)."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(n_instances):
        n = int(rng.integers(2, 6))
        log_q = rng.normal(0.0, 2.0, size=n)
        constraint = KlBallConstraint(float(rng.uniform(0.0, 1.0)), n)
        lam1 = float(rng.uniform(0.0, 8.0))
        lam2 = lam1 + float(rng.uniform(1e-6, 8.0))
        worst = max(
            worst,
            kernel_f(log_q, lam2, constraint) - kernel_f(log_q, lam1, constraint),
        )
    return worst


def rademacher_check() -> tuple[float, float, float]:
    """(exact, monte-carlo, std error) on the 2-hypothesis / 3-sample fixture."""
    table = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    exact = rademacher_estimate(table)
    mc = rademacher_estimate(
        table, n_draws=100_000, rng=np.random.default_rng(7), method="sample"
    )
    return exact.value, mc.value, mc.std_error


def run_verification(report=print) -> bool:
    """Run the oracle suites and print one PASS/FAIL line per check."""
    ok = True

    def check(name: str, passed: bool, detail: str) -> None:
        nonlocal ok
        ok = ok and passed
        report(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    max_gap, median_gap = oracle_agreement_check()
    check(
        "allocator-oracle-agreement",
        max_gap <= 1e-3 and median_gap <= 1e-5,
        f"max gap {max_gap:.2e} (<= 1e-3), median {median_gap:.2e} (<= 1e-5)",
    )
    excess, active = feasibility_check()
    check(
        "kl-feasibility-and-activation",
        excess <= 1e-6 and active >= -1e-4,
        f"worst excess {excess:.2e} (<= 1e-6), worst active slack {active:.2e} (>= -1e-4)",
    )
    worst_rise = kernel_monotonicity_check()
    check(
        "kernel-monotone-in-lambda",
        worst_rise <= 1e-10,
        f"worst residual increase {worst_rise:.2e} (<= 1e-10)",
    )
    exact, mc, se = rademacher_check()
    check(
        "rademacher-exact-vs-monte-carlo",
        abs(mc - exact) <= 3.0 * se,
        f"exact {exact:.6f}, monte-carlo {mc:.6f} +/- {se:.6f}",
    )
    return ok
