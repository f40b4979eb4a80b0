"""Independent oracles for the weight allocator and estimator desk-checks.

Everything here is brute force on purpose: the oracle must not share code
paths with the allocator it validates.  The projection oracle minimizes the
entropy Bregman divergence ``D(p, q) = sum_i p_i log(p_i / q_i)`` directly,
once over the tempered one-parameter family (dense sweep plus one local
refinement, no sign-based root finding) and once over a barycentric grid
that does not assume the tempered form at all.  The better feasible point
wins; the grid guards against the structural assumption being wrong.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .allocator import KlBallConstraint, WeightVector
from .errors import OracleScopeError

_SWEEP_POINTS = 6401
_REFINE_POINTS = 20001
_LAMBDA_MAX = 64.0


@dataclass(frozen=True)
class OracleSolution:
    """Best feasible point found, with per-branch objectives for comparison."""

    weights: WeightVector
    objective_value: float
    feasible: bool
    source: str
    sweep_objective: float
    grid_objective: float


@dataclass(frozen=True)
class RademacherEstimate:
    value: float
    std_error: float
    exact: bool
    n_draws: int


@dataclass(frozen=True)
class ConvergenceReport:
    min_squared_grad_norm: float
    decay_slope: float
    n_points: int
    sufficient: bool


@lru_cache(maxsize=None)
def _simplex_grid(n: int, resolution: int) -> np.ndarray:
    """All points (k_1,...,k_n)/resolution with integer k_i summing to resolution."""
    r = resolution
    if n == 1:
        counts = np.array([[r]])
    elif n == 2:
        k = np.arange(r + 1)
        counts = np.stack([k, r - k], axis=1)
    elif n == 3:
        i, j = np.meshgrid(np.arange(r + 1), np.arange(r + 1), indexing="ij")
        i, j = i.ravel(), j.ravel()
        keep = i + j <= r
        i, j = i[keep], j[keep]
        counts = np.stack([i, j, r - i - j], axis=1)
    elif n == 4:
        i, j, k = np.meshgrid(
            np.arange(r + 1), np.arange(r + 1), np.arange(r + 1), indexing="ij"
        )
        i, j, k = i.ravel(), j.ravel(), k.ravel()
        keep = i + j + k <= r
        i, j, k = i[keep], j[keep], k[keep]
        counts = np.stack([i, j, k, r - i - j - k], axis=1)
    else:
        raise OracleScopeError(f"barycentric grid supports n <= 4, got {n}")
    return counts.astype(float) / float(r)


def _kl_rows(p: np.ndarray, log_ref: np.ndarray) -> np.ndarray:
    """Row-wise sum p * (log p - log_ref), with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - log_ref), 0.0)
    return terms.sum(axis=1)


def _residual_rows(p: np.ndarray, rho: float) -> np.ndarray:
    n = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(n * p), 0.0)
    return terms.sum(axis=1) - rho


def _tempered(a: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    t = 1.0 / (1.0 + lambdas)
    e = np.exp(t[:, None] * a[None, :])
    return e / e.sum(axis=1, keepdims=True)


def bregman_projection_oracle(
    log_q,
    constraint: KlBallConstraint,
    grid_resolution: int = 100,
    feasibility_tol: float = 1e-9,
) -> OracleSolution:
    """Brute-force minimizer of D(p, q) over the KL ball (n <= 4, tests only).

    Candidates come from (a) a dense lambda sweep over the tempered family
    with one refinement pass around the best feasible point and (b) a full
    barycentric grid at ``grid_resolution``, plus the uniform point, which is
    feasible for every nonnegative radius.
    """
    lq = np.asarray(
        log_q.values if isinstance(log_q, WeightVector) else log_q, dtype=float
    )
    n = lq.size
    if n > 4:
        raise OracleScopeError(f"oracle enumerates up to 4 weights, got {n}")
    if grid_resolution < 100:
        raise ValueError("grid_resolution must be at least 100")
    rho = constraint.rho

    a = lq - lq.max()
    log_ref = a - math.log(float(np.exp(a).sum()))  # log of normalized q

    def best_of(p_rows: np.ndarray) -> tuple[float, np.ndarray | None, int]:
        feasible = _residual_rows(p_rows, rho) <= feasibility_tol
        if not feasible.any():
            return math.inf, None, -1
        objs = np.where(feasible, _kl_rows(p_rows, log_ref), math.inf)
        i = int(np.argmin(objs))
        return float(objs[i]), p_rows[i], i

    # Tempered-family sweep, then refine around the winner.
    lambdas = np.linspace(0.0, _LAMBDA_MAX, _SWEEP_POINTS)
    sweep_obj, sweep_p, idx = best_of(_tempered(a, lambdas))
    if sweep_p is not None:
        lo = lambdas[max(idx - 1, 0)]
        hi = lambdas[min(idx + 1, lambdas.size - 1)]
        fine_obj, fine_p, _ = best_of(_tempered(a, np.linspace(lo, hi, _REFINE_POINTS)))
        if fine_obj < sweep_obj:
            sweep_obj, sweep_p = fine_obj, fine_p

    # Uniform is feasible for any rho >= 0 and caps the sweep's reach.
    uniform = np.full((1, n), 1.0 / n)
    uni_obj, uni_p, _ = best_of(uniform)
    if uni_obj < sweep_obj:
        sweep_obj, sweep_p = uni_obj, uni_p

    grid_obj, grid_p, _ = best_of(_simplex_grid(n, grid_resolution))

    if grid_obj < sweep_obj:
        best_obj, best_p, source = grid_obj, grid_p, "grid"
    else:
        best_obj, best_p, source = sweep_obj, sweep_p, "tempered-sweep"
    return OracleSolution(
        weights=WeightVector(best_p),
        objective_value=best_obj,
        feasible=True,
        source=source,
        sweep_objective=sweep_obj,
        grid_objective=grid_obj,
    )


def rademacher_estimate(
    loss_table, n_draws: int = 100_000, rng=None, method: str = "auto"
) -> RademacherEstimate:
    """E_tau sup_h (1/n) sum_j tau_j * loss[h][j] with tau uniform on {-1,+1}^n.

    By default enumerates all 2^n sign vectors exactly when n <= 12 and
    falls back to Monte Carlo (with the standard error of the mean) above
    that; ``method`` can force either path, e.g. to cross-check the sampler
    against the enumeration on a small fixture.
    """
    table = np.asarray(loss_table, dtype=float)
    if table.ndim != 2 or table.size == 0:
        raise ValueError("loss_table must be a non-empty 2-d array (hypotheses x samples)")
    if method not in ("auto", "exact", "sample"):
        raise ValueError(f"method must be auto/exact/sample, got {method!r}")
    n = table.shape[1]
    if method == "exact" or (method == "auto" and n <= 12):
        if n > 20:
            raise ValueError(f"exact enumeration over 2^{n} sign vectors is out of reach")
        idx = np.arange(2**n)
        signs = ((idx[:, None] >> np.arange(n)) & 1) * 2.0 - 1.0
        sups = (signs @ table.T).max(axis=1) / n
        return RademacherEstimate(float(sups.mean()), 0.0, True, 2**n)
    if rng is None:
        rng = np.random.default_rng(0)
    signs = rng.integers(0, 2, size=(n_draws, n)) * 2.0 - 1.0
    sups = (signs @ table.T).max(axis=1) / n
    se = float(sups.std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else math.inf
    return RademacherEstimate(float(sups.mean()), se, False, n_draws)


def convergence_report(round_records: Iterable) -> ConvergenceReport:
    """Decay diagnostics from logged full-data gradient norms.

    Reports the minimum squared norm and the log-log least-squares slope of
    the running minimum of the logged norms against the round index.
    """
    points: list[tuple[float, float]] = []
    for rec in round_records:
        if isinstance(rec, dict):
            t, g = rec.get("round"), rec.get("grad_norm")
        else:
            t, g = getattr(rec, "round_index", None), getattr(rec, "grad_norm", None)
        if t is None or g is None:
            continue
        if t >= 1 and np.isfinite(g):
            points.append((float(t), float(g)))
    if len(points) < 3:
        return ConvergenceReport(math.nan, math.nan, len(points), False)
    points.sort()
    ts = np.array([t for t, _ in points])
    norms = np.array([g for _, g in points])
    running = np.minimum.accumulate(norms)
    keep = running > 0.0
    if keep.sum() < 3:
        return ConvergenceReport(float((norms**2).min()), math.nan, len(points), False)
    slope = float(np.polyfit(np.log(ts[keep]), np.log(running[keep]), 1)[0])
    return ConvergenceReport(float((norms**2).min()), slope, len(points), True)
