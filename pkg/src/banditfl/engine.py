"""Simulated federated training: client sampling, local SGD, aggregation.

One round sends the server model to a sampled subset of clients, runs K
minibatch-SGD steps on each client's slice, and folds the returned deltas
back into the server model under one of the aggregation strategies.  Every
random choice is keyed by (seed, stream, round, client), so rounds are
reproducible and the result does not depend on the order clients happen to
be processed in: aggregation always reduces updates in client-id order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from itertools import islice

import numpy as np

from . import models
from .allocator import AllocatorConfig, update_weights
from .data import FederatedDataset
from .errors import AggregationError, ConfigError, DivergenceError
from .metrics import (
    chi_square_divergence,
    fairness_report,
    generalization_bound_rhs,
)
from .seeding import (
    INIT_STREAM,
    LOCAL_TRAIN_STREAM,
    SAMPLING_STREAM,
    rng_for,
)

QFFL_LOSS_FLOOR = 1e-8
BOUND_DELTA = 0.05


@dataclass(frozen=True)
class FedAvg:
    """Data-size-weighted averaging; prox_mu > 0 adds a proximal pull to local SGD."""

    eta_s: float = 1.0
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        _check_common(self.eta_s, self.prox_mu)


@dataclass(frozen=True)
class FedMaba:
    """Bandit allocation blended with uniform averaging by the trade-off alpha."""

    alpha: float
    allocator: AllocatorConfig
    eta_s: float = 1.0
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        _check_common(self.eta_s, self.prox_mu)


@dataclass(frozen=True)
class QFfl:
    """Loss-power reweighting (simplified q-FFL): weights ~ n_i * F_i^q."""

    q: float
    eta_s: float = 1.0
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.q < 0.0:
            raise ConfigError(f"q must be nonnegative, got {self.q}")
        _check_common(self.eta_s, self.prox_mu)


AggregationStrategy = FedAvg | FedMaba | QFfl


def _check_common(eta_s: float, prox_mu: float) -> None:
    if eta_s <= 0.0:
        raise ConfigError(f"eta_s must be positive, got {eta_s}")
    if prox_mu < 0.0:
        raise ConfigError(f"prox_mu must be nonnegative, got {prox_mu}")


def strategy_label(strategy: AggregationStrategy) -> str:
    if isinstance(strategy, FedMaba):
        return "fedmaba"
    if isinstance(strategy, QFfl):
        return "qffl"
    return "fedprox" if strategy.prox_mu > 0.0 else "fedavg"


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    selected_clients: tuple[int, ...]
    client_lr: float
    local_steps: int
    batch_size: int

    def __post_init__(self) -> None:
        if not self.selected_clients:
            raise ConfigError("a round needs at least one selected client")
        if len(set(self.selected_clients)) != len(self.selected_clients):
            raise ConfigError("selected clients must be distinct")
        if self.local_steps < 1 or self.batch_size < 1:
            raise ConfigError("local_steps and batch_size must be at least 1")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    reported_loss: float
    sample_count: int


@dataclass(frozen=True)
class MabaRoundInfo:
    lambda_star: float
    subset_weights: np.ndarray
    blend_weights: np.ndarray


def sample_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform, sorted, duplicate-free subset of size round(fraction * n_clients)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"participation fraction must lie in (0, 1], got {fraction}")
    size = max(1, int(math.floor(fraction * n_clients + 0.5)))
    return np.sort(rng.choice(n_clients, size=size, replace=False))


def effective_lr(base_lr: float, decay: float, round_index: int) -> float:
    return base_lr * decay ** (round_index - 1)


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    # Shuffled passes, reshuffling whenever a pass is exhausted; the final
    # batch of a pass may be smaller than batch_size.
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def local_train(
    params: models.ModelParams,
    spec,
    features: np.ndarray,
    labels: np.ndarray,
    plan: RoundPlan,
    prox_mu: float,
    anchor: np.ndarray,
    rng: np.random.Generator,
    client_id: int,
    loss_grad=models.loss_and_gradient,
) -> ClientUpdate:
    """K minibatch-SGD steps on one client's slice.

    Returns the parameter delta and the mean per-step minibatch loss, each
    loss taken at the pre-step parameters.  prox_mu > 0 adds
    mu * (w - anchor) to every gradient; the reported loss stays the plain
    task loss.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("client slice must be non-empty")
    w = params.values.copy()
    anchor = np.asarray(anchor, dtype=float)
    step_losses = []
    for batch in islice(_batch_stream(n, plan.batch_size, rng), plan.local_steps):
        loss, grad = loss_grad(
            models.ModelParams(w, params.layer_dims), spec, features[batch], labels[batch]
        )
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(
                f"non-finite loss or gradient at round {plan.round_index}, client {client_id}"
            )
        if prox_mu > 0.0:
            grad = grad + prox_mu * (w - anchor)
        step_losses.append(loss)
        w = w - plan.client_lr * grad
    return ClientUpdate(
        client_id=client_id,
        delta=w - params.values,
        reported_loss=float(np.mean(step_losses)),
        sample_count=n,
    )


def _sorted_updates(updates, model_size: int) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in updates: {ids}")
    for u in ordered:
        if u.delta.shape != (model_size,):
            raise AggregationError(
                f"client {u.client_id} sent a delta of shape {u.delta.shape}, "
                f"expected ({model_size},)"
            )
    return ordered


def _weighted_delta(updates: list[ClientUpdate], weights: np.ndarray) -> np.ndarray:
    total = np.zeros_like(updates[0].delta)
    for u, w in zip(updates, weights):
        total += w * u.delta
    return total


def aggregate_fedavg(
    model_values: np.ndarray, updates, strategy: FedAvg
) -> tuple[np.ndarray, np.ndarray]:
    """w + eta_s * sum_i (n_i / sum_j n_j) * delta_i; returns (model, weights used)."""
    ordered = _sorted_updates(updates, model_values.size)
    counts = np.array([u.sample_count for u in ordered], dtype=float)
    weights = counts / counts.sum()
    return model_values + strategy.eta_s * _weighted_delta(ordered, weights), weights


def aggregate_qffl(
    model_values: np.ndarray, updates, strategy: QFfl
) -> tuple[np.ndarray, np.ndarray]:
    """Weights proportional to n_i * F_i^q, with losses floored at 1e-8."""
    ordered = _sorted_updates(updates, model_values.size)
    counts = np.array([u.sample_count for u in ordered], dtype=float)
    losses = np.array(
        [max(u.reported_loss, QFFL_LOSS_FLOOR) for u in ordered], dtype=float
    )
    raw = counts * losses**strategy.q
    weights = raw / raw.sum()
    return model_values + strategy.eta_s * _weighted_delta(ordered, weights), weights


def aggregate_fedmaba(
    model_values: np.ndarray,
    updates,
    persistent_weights: np.ndarray,
    strategy: FedMaba,
) -> tuple[np.ndarray, np.ndarray, MabaRoundInfo]:
    """Allocator step on the participating subset, then a blended model update.

    The subset's entries of the persistent weight vector are updated by the
    allocator (with N taken as the subset size), written back rescaled to
    the subset's previous total mass so the global vector stays on the
    simplex, and the normalized subset weights are blended with uniform
    averaging:  w + eta_s * sum_i (alpha * p~_i + (1-alpha)/k) * delta_i.
    """
    ordered = _sorted_updates(updates, model_values.size)
    ids = np.array([u.client_id for u in ordered])
    if ids.min() < 0 or ids.max() >= persistent_weights.size:
        raise AggregationError(f"client ids {ids} out of range for weight vector")
    subset = persistent_weights[ids]
    mass = float(subset.sum())
    losses = np.array([u.reported_loss for u in ordered], dtype=float)
    new_subset, lambda_star = update_weights(subset / mass, losses, strategy.allocator)
    subset_weights = new_subset.values

    new_global = persistent_weights.copy()
    new_global[ids] = subset_weights * mass
    new_global /= new_global.sum()  # guard against ulp drift over many rounds

    # The explicit renormalization over the subset is a no-op under the
    # mass-preserving write-back; blend with uniform averaging.
    k = len(ordered)
    blend = strategy.alpha * subset_weights + (1.0 - strategy.alpha) * (1.0 / k)
    new_model = model_values + strategy.eta_s * _weighted_delta(ordered, blend)
    info = MabaRoundInfo(
        lambda_star=lambda_star, subset_weights=subset_weights, blend_weights=blend
    )
    return new_model, new_global, info


@dataclass
class RoundRecord:
    """Per-round snapshot; evaluation fields are filled on evaluation rounds."""

    round_index: int
    strategy: str
    seed: int
    client_lr: float
    wall_time: float
    chi_square_uniform: float
    lambda_star: float | None
    weights: list[float] | None
    evaluated: bool
    global_test_accuracy: float | None = None
    global_test_loss: float | None = None
    global_train_loss: float | None = None
    grad_norm: float | None = None
    per_client_test_accuracy: list[float] | None = None
    per_client_test_loss: list[float] | None = None
    per_client_train_loss: list[float] | None = None
    fairness_variance: float | None = None
    worst5_mean: float | None = None
    best5_mean: float | None = None
    generalization_gap: float | None = None
    bound_rhs: float | None = None
    bound_c: float | None = None
    bound_c_source: str | None = None


@dataclass
class ExperimentState:
    """Everything one (strategy, seed) cell mutates while running."""

    dataset: FederatedDataset
    model_spec: models.ModelSpec
    strategy: AggregationStrategy
    strategy_name: str
    seed: int
    params: models.ModelParams
    weights: np.ndarray
    participation_fraction: float = 1.0
    client_lr: float = 0.1
    client_lr_decay: float = 0.999
    local_steps: int = 10
    batch_size: int = 50
    eval_every: int = 10
    loss_clip: float | None = None
    round_index: int = 0
    max_sample_loss: float = 0.0
    weight_history: list[np.ndarray] = field(default_factory=list)


def init_experiment(
    dataset: FederatedDataset,
    model_spec: models.ModelSpec,
    strategy: AggregationStrategy,
    seed: int,
    *,
    strategy_name: str | None = None,
    participation_fraction: float = 1.0,
    client_lr: float = 0.1,
    client_lr_decay: float = 0.999,
    local_steps: int = 10,
    batch_size: int = 50,
    eval_every: int = 10,
    loss_clip: float | None = None,
) -> ExperimentState:
    """Round-zero state: seeded model init and uniform aggregation weights."""
    params = models.init_params(model_spec, rng_for(seed, INIT_STREAM))
    n = dataset.n_clients
    return ExperimentState(
        dataset=dataset,
        model_spec=model_spec,
        strategy=strategy,
        strategy_name=strategy_name or strategy_label(strategy),
        seed=seed,
        params=params,
        weights=np.full(n, 1.0 / n),
        participation_fraction=participation_fraction,
        client_lr=client_lr,
        client_lr_decay=client_lr_decay,
        local_steps=local_steps,
        batch_size=batch_size,
        eval_every=eval_every,
        loss_clip=loss_clip,
    )


def run_round(state: ExperimentState, evaluate: bool | None = None) -> RoundRecord:
    """Advance the experiment by one communication round."""
    start = time.perf_counter()
    t = state.round_index + 1
    if evaluate is None:
        evaluate = t % state.eval_every == 0
    dataset = state.dataset
    selected = sample_clients(
        dataset.n_clients, state.participation_fraction, rng_for(state.seed, SAMPLING_STREAM, t)
    )
    plan = RoundPlan(
        round_index=t,
        selected_clients=tuple(int(c) for c in selected),
        client_lr=effective_lr(state.client_lr, state.client_lr_decay, t),
        local_steps=state.local_steps,
        batch_size=state.batch_size,
    )

    updates = []
    for cid in plan.selected_clients:
        x, y = dataset.client_slice(cid)
        update = local_train(
            state.params,
            state.model_spec,
            x,
            y,
            plan,
            state.strategy.prox_mu,
            state.params.values,
            rng_for(state.seed, LOCAL_TRAIN_STREAM, t, cid),
            cid,
        )
        if state.loss_clip is not None:
            update = replace(update, reported_loss=min(update.reported_loss, state.loss_clip))
        updates.append(update)

    strategy = state.strategy
    lambda_star: float | None = None
    weights_list: list[float] | None = None
    if isinstance(strategy, FedMaba):
        new_values, new_weights, info = aggregate_fedmaba(
            state.params.values, updates, state.weights, strategy
        )
        state.weights = new_weights
        lambda_star = info.lambda_star
        weights_list = [float(v) for v in new_weights]
        chi_sq = chi_square_divergence(
            np.full(new_weights.size, 1.0 / new_weights.size), new_weights
        )
    else:
        if isinstance(strategy, QFfl):
            new_values, used = aggregate_qffl(state.params.values, updates, strategy)
        else:
            new_values, used = aggregate_fedavg(state.params.values, updates, strategy)
        chi_sq = chi_square_divergence(np.full(used.size, 1.0 / used.size), used)

    state.params = models.ModelParams(new_values, state.params.layer_dims)
    state.round_index = t
    state.weight_history.append(state.weights.copy())

    record = RoundRecord(
        round_index=t,
        strategy=state.strategy_name,
        seed=state.seed,
        client_lr=plan.client_lr,
        wall_time=0.0,
        chi_square_uniform=chi_sq,
        lambda_star=lambda_star,
        weights=weights_list,
        evaluated=bool(evaluate),
    )
    if evaluate:
        _evaluate_into(state, record)
    record.wall_time = time.perf_counter() - start
    return record


def _evaluate_into(state: ExperimentState, record: RoundRecord) -> None:
    dataset = state.dataset
    params, spec = state.params, state.model_spec

    acc: list[float] = []
    test_loss: list[float] = []
    train_loss: list[float] = []
    for cid in sorted(dataset.partition):
        xt, yt = dataset.client_test_slice(cid)
        a, l = models.evaluate(params, spec, xt, yt)
        acc.append(a)
        test_loss.append(l)
        xs, ys = dataset.client_slice(cid)
        train_loss.append(models.evaluate(params, spec, xs, ys)[1])

    record.global_test_accuracy, record.global_test_loss = models.evaluate(
        params, spec, dataset.test_features, dataset.test_labels
    )
    full_loss, full_grad = models.loss_and_gradient(
        params, spec, dataset.features, dataset.labels
    )
    record.global_train_loss = full_loss
    record.grad_norm = float(np.linalg.norm(full_grad))

    sample_max = float(
        models.per_sample_losses(params, spec, dataset.features, dataset.labels).max()
    )
    state.max_sample_loss = max(state.max_sample_loss, sample_max)
    if state.loss_clip is not None:
        record.bound_c, record.bound_c_source = state.loss_clip, "clip"
    else:
        # the bound needs c > 0; a fully saturated model can underflow to 0
        record.bound_c = max(state.max_sample_loss, 1e-12)
        record.bound_c_source = "observed"

    report = fairness_report(acc, test_loss)
    record.per_client_test_accuracy = acc
    record.per_client_test_loss = test_loss
    record.per_client_train_loss = train_loss
    record.fairness_variance = report.variance
    record.worst5_mean = report.worst_5pct_mean
    record.best5_mean = report.best_5pct_mean
    record.generalization_gap = record.global_test_loss - record.global_train_loss
    record.bound_rhs = generalization_bound_rhs(
        train_loss, record.bound_c, BOUND_DELTA, dataset.n_clients
    )


def run_rounds(state: ExperimentState, rounds: int) -> list[RoundRecord]:
    """Run ``rounds`` rounds, forcing an evaluation on the final one."""
    records = []
    for _ in range(rounds):
        t = state.round_index + 1
        force_last = t == rounds
        records.append(run_round(state, evaluate=(t % state.eval_every == 0) or force_last))
    return records
