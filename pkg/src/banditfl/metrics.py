"""Fairness and performance metrics, plus assumption diagnostics.

Fairness follows the variance-of-client-performance convention: the
population variance (divide by N) of per-client test accuracy, reported in
percentage points squared so that logged numbers are comparable across
experiments.  The generalization bound and the gradient statistics are
desk-check diagnostics, not assertions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models
from .allocator import floor_weights
from .errors import MetricError

_QUANTILE_TAIL = 0.05


@dataclass(frozen=True)
class FairnessReport:
    variance: float
    worst_5pct_mean: float
    best_5pct_mean: float
    loss_std: float


@dataclass(frozen=True)
class GradientStats:
    """Estimated constants behind the smoothness/dissimilarity assumptions."""

    sigma_sq: float
    gamma_sq: float
    a_sq: float
    kappa: float
    lipschitz: float


def variance_fairness(values) -> float:
    """Population variance (divide by N, not N-1)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise MetricError("variance of an empty sequence is undefined")
    return float(np.var(arr))


def tail_means(values, tail_fraction: float = _QUANTILE_TAIL) -> tuple[float, float]:
    """Means of the lowest and highest max(1, floor(tail_fraction*N)) entries."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise MetricError("tail means of an empty sequence are undefined")
    k = max(1, int(math.floor(tail_fraction * arr.size)))
    ordered = np.sort(arr, kind="stable")
    return float(ordered[:k].mean()), float(ordered[-k:].mean())


def fairness_report(per_client_accuracy, per_client_loss) -> FairnessReport:
    acc = np.asarray(per_client_accuracy, dtype=float)
    losses = np.asarray(per_client_loss, dtype=float)
    worst, best = tail_means(acc)
    return FairnessReport(
        variance=variance_fairness(acc * 100.0),
        worst_5pct_mean=worst,
        best_5pct_mean=best,
        loss_std=float(np.sqrt(variance_fairness(losses))),
    )


def chi_square_divergence(p_ref, p) -> float:
    """sum_i (p_ref_i - p_i)^2 / p_i, with p floored away from zero."""
    ref = np.asarray(p_ref, dtype=float)
    arr = np.asarray(p, dtype=float)
    if ref.shape != arr.shape:
        raise MetricError(f"length mismatch: {ref.shape} vs {arr.shape}")
    arr = floor_weights(arr)
    return float(np.sum((ref - arr) ** 2 / arr))


def generalization_bound_rhs(per_client_losses, c: float, delta: float, n_clients: int) -> float:
    """2 * sqrt(population variance of client losses) + 4c * sqrt(2 ln(2/delta) / N)."""
    if not 0.0 < delta < 1.0:
        raise MetricError(f"delta must lie in (0, 1), got {delta}")
    if c <= 0.0:
        raise MetricError("the bounded-loss constant c must be positive")
    losses = np.asarray(per_client_losses, dtype=float)
    if losses.size == 0 or not np.all(np.isfinite(losses)):
        raise MetricError("per-client losses must be non-empty and finite")
    spread = math.sqrt(variance_fairness(losses))
    return 2.0 * spread + 4.0 * c * math.sqrt(2.0 * math.log(2.0 / delta) / n_clients)


def lipschitz_estimate(
    grad_fn,
    dim: int,
    n_pairs: int,
    rng: np.random.Generator,
    center: np.ndarray | None = None,
    scale: float = 1.0,
) -> float:
    """Max of ||g(x) - g(y)|| / ||x - y|| over random parameter pairs."""
    if n_pairs < 1:
        raise MetricError("need at least one parameter pair")
    mid = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    best = 0.0
    for _ in range(n_pairs):
        x = mid + scale * rng.standard_normal(dim)
        y = mid + scale * rng.standard_normal(dim)
        gap = float(np.linalg.norm(x - y))
        if gap == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(x) - grad_fn(y))) / gap)
    return best


def _dissimilarity_fit(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Fit y = slope*x + intercept, clamped to slope >= 1, intercept >= 0."""
    if xs.size < 2 or float(np.var(xs)) < 1e-18:
        return 1.0, max(0.0, float(np.mean(ys - xs)))
    slope, intercept = np.polyfit(xs, ys, 1)
    return max(1.0, float(slope)), max(0.0, float(intercept))


def estimate_gradient_stats(
    params,
    spec,
    dataset,
    weight_history,
    n_probes: int,
    rng: np.random.Generator,
    batch_size: int = 50,
) -> GradientStats:
    """Diagnostics for the analysis constants (noise, dissimilarity, drift, smoothness).

    sigma_sq: mean squared gap between minibatch and full-slice gradients.
    (gamma_sq, a_sq): least-squares fit of sum_i p_i ||g_i||^2 against
    ||sum_i p_i g_i||^2 across randomly perturbed parameter points.
    kappa: worst chi-square drift of the logged weights from uniform.
    lipschitz: max gradient-difference ratio over random parameter pairs.
    """
    if n_probes < 2:
        raise MetricError("need at least two probes")
    history = [np.asarray(w, dtype=float) for w in weight_history]
    if not history:
        raise MetricError("weight_history must contain at least one vector")
    clients = sorted(dataset.partition)
    weights = history[-1]
    if weights.size != len(clients):
        raise MetricError("weights must have one entry per client")

    # Minibatch noise against the full-slice gradient.
    gaps = []
    for j in range(n_probes):
        cid = clients[j % len(clients)]
        x, y = dataset.client_slice(cid)
        _, g_full = models.loss_and_gradient(params, spec, x, y)
        if batch_size >= x.shape[0]:
            g_batch = g_full
        else:
            pick = rng.choice(x.shape[0], size=batch_size, replace=False)
            _, g_batch = models.loss_and_gradient(params, spec, x[pick], y[pick])
        gaps.append(float(np.sum((g_batch - g_full) ** 2)))
    sigma_sq = float(np.mean(gaps))

    # Weighted gradient dissimilarity across perturbed parameter points.
    xs, ys = [], []
    for j in range(n_probes):
        probe = params.copy()
        if j > 0:
            probe.values = probe.values + 0.1 * rng.standard_normal(probe.values.size)
        per_client = []
        for cid in clients:
            x, y = dataset.client_slice(cid)
            per_client.append(models.loss_and_gradient(probe, spec, x, y)[1])
        stacked = np.stack(per_client)
        ys.append(float(weights @ np.sum(stacked**2, axis=1)))
        xs.append(float(np.sum((weights @ stacked) ** 2)))
    gamma_sq, a_sq = _dissimilarity_fit(np.asarray(xs), np.asarray(ys))

    kappa = max(
        chi_square_divergence(np.full(w.size, 1.0 / w.size), w) for w in history
    )

    def global_grad(values: np.ndarray) -> np.ndarray:
        probe = models.ModelParams(values, params.layer_dims)
        return models.loss_and_gradient(probe, spec, dataset.features, dataset.labels)[1]

    lipschitz = lipschitz_estimate(
        global_grad, params.values.size, n_probes, rng, center=params.values, scale=0.5
    )
    return GradientStats(sigma_sq, gamma_sq, a_sq, float(kappa), lipschitz)
