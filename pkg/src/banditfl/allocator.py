"""Aggregation-weight allocation by entropy mirror ascent inside a KL ball.

The server keeps a probability vector p over clients and, each round, pushes
it toward high-loss clients.  The update is an exponentiated-gradient step
``log q_i = log p_i + eta_b * F_i`` followed by a projection of q back onto
the feasible set

    P(rho, N) = { p on the simplex : sum_i p_i log(N p_i) <= rho },

i.e. the KL ball of radius rho around the uniform distribution.  Under the
negative-entropy mirror map the projection is a *tempered* renormalization
``p_i ~ q_i ** (1 / (1 + lambda))``, where lambda >= 0 is the Lagrange
multiplier of the KL constraint.  The residual function ``kernel_f`` is
monotone nonincreasing in lambda, so the multiplier is found by bracketing
and bisection; lambda = 0 whenever the unconstrained step already lies in
the ball.

All q arithmetic is carried out in log space with max-subtraction, so large
losses cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BracketFailureError,
    DegenerateWeightsError,
    DimensionMismatchError,
)

SIMPLEX_ATOL = 1e-9
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightVector:
    """A point on the simplex, or a dual point stored as log-weights.

    With ``log_space=False`` the entries must be nonnegative and sum to one
    within ``SIMPLEX_ATOL``; with ``log_space=True`` only finiteness is
    required (the values are logarithms of unnormalized weights).
    """

    values: np.ndarray
    log_space: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("weight vector must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(arr)):
            raise ValueError("weight vector entries must be finite")
        if not self.log_space:
            if np.any(arr < 0.0):
                raise ValueError("probability weights must be nonnegative")
            if abs(float(arr.sum()) - 1.0) > SIMPLEX_ATOL:
                raise ValueError(
                    f"probability weights must sum to 1 (got {float(arr.sum())!r})"
                )

    def __len__(self) -> int:
        return int(self.values.size)

    @classmethod
    def uniform(cls, n: int) -> "WeightVector":
        if n < 1:
            raise ValueError("need at least one weight")
        return cls(np.full(n, 1.0 / n))


@dataclass(frozen=True)
class KlBallConstraint:
    """KL ball of radius ``rho`` (nats) around uniform over ``n_total`` arms."""

    rho: float
    n_total: int

    def __post_init__(self) -> None:
        if self.rho < 0.0:
            raise ValueError("rho must be nonnegative")
        if self.n_total < 1:
            raise ValueError("n_total must be at least 1")


@dataclass(frozen=True)
class AllocatorConfig:
    """Step size and root-search knobs for the weight update."""

    eta_b: float
    rho: float = 1.0
    lambda_max_initial: float = 1.0
    lambda_tolerance: float = 1e-6
    max_bracket_doublings: int = 60

    def __post_init__(self) -> None:
        if self.eta_b <= 0.0:
            raise ValueError("eta_b must be positive")
        if self.rho < 0.0:
            raise ValueError("rho must be nonnegative")
        if self.lambda_max_initial <= 0.0:
            raise ValueError("lambda_max_initial must be positive")
        if self.lambda_tolerance <= 0.0:
            raise ValueError("lambda_tolerance must be positive")
        if self.max_bracket_doublings < 1:
            raise ValueError("max_bracket_doublings must be at least 1")


def _as_array(values, name: str) -> np.ndarray:
    if isinstance(values, WeightVector):
        values = values.values
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d sequence")
    return arr


def floor_weights(p, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Clamp entries below ``floor`` and renormalize onto the simplex.

    The mirror map is undefined on the simplex boundary; flooring keeps the
    ordering of entries while moving the point strictly inside.
    """
    arr = _as_array(p, "weights")
    arr = np.maximum(arr, floor)
    return arr / arr.sum()


def kl_to_uniform(p) -> float:
    """sum_i p_i log(N p_i): KL divergence from uniform, with 0 log 0 = 0."""
    arr = _as_array(p, "weights")
    n = arr.size
    pos = arr[arr > 0.0]
    return float(np.sum(pos * np.log(n * pos)))


def dual_step(p, losses, eta_b: float) -> WeightVector:
    """Exponentiated-gradient step in the dual space, returned as log q.

    log q_i = log p_i + eta_b * F_i.  Constant offsets in the dual point
    cancel under the later normalization, so none are tracked.
    """
    p_arr = _as_array(p, "weights")
    loss_arr = _as_array(losses, "losses")
    if p_arr.size != loss_arr.size:
        raise DimensionMismatchError(
            f"weights have length {p_arr.size} but losses have length {loss_arr.size}"
        )
    if not np.all(np.isfinite(loss_arr)):
        raise ValueError("losses must be finite")
    if np.any(p_arr == 0.0):
        raise DegenerateWeightsError(
            "weights must be strictly positive; floor them first (floor_weights)"
        )
    return WeightVector(np.log(p_arr) + eta_b * loss_arr, log_space=True)


def kernel_f(log_q, lam: float, constraint: KlBallConstraint) -> float:
    """Constraint residual of the lambda-tempered weights.

    Equals sum_i p_i(lam) log(N p_i(lam)) - rho where p(lam) is the
    normalization of q ** (1/(1+lam)).  Monotone nonincreasing in lambda,
    tending to -rho as lambda grows.
    """
    if lam < 0.0:
        raise ValueError("lambda must be nonnegative")
    lq = _as_array(log_q, "log_q")
    if not np.all(np.isfinite(lq)):
        raise ValueError("log_q must be finite")
    if lq.size != constraint.n_total:
        raise DimensionMismatchError(
            f"log_q has length {lq.size} but constraint.n_total is {constraint.n_total}"
        )
    t = 1.0 / (1.0 + lam)
    a = lq - lq.max()
    e = np.exp(t * a)
    s = float(e.sum())
    # t * <a, softmax(t a)> - log s  ==  sum p log p  after max-subtraction
    return t * float(a @ e) / s - math.log(s) + math.log(lq.size) - constraint.rho


def solve_lambda(log_q, constraint: KlBallConstraint, config: AllocatorConfig) -> float:
    """Find the multiplier lambda* of the KL constraint.

    Returns 0 when the unconstrained step is already feasible (inactive
    constraint).  Otherwise doubles an upper bracket until the residual goes
    negative, then bisects down to ``lambda_tolerance`` bracket width.
    """
    if kernel_f(log_q, 0.0, constraint) <= 0.0:
        return 0.0
    lo = 0.0
    hi = config.lambda_max_initial
    for _ in range(config.max_bracket_doublings):
        if kernel_f(log_q, hi, constraint) < 0.0:
            break
        lo = hi
        hi *= 2.0
    else:
        raise BracketFailureError(
            f"residual stayed positive up to lambda={hi}; "
            "with rho=0 only a uniform dual point is feasible"
        )
    while hi - lo > config.lambda_tolerance:
        mid = 0.5 * (lo + hi)
        if kernel_f(log_q, mid, constraint) >= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def project(log_q, lambda_star: float) -> WeightVector:
    """Tempered renormalization p_i = q_i^(1/(1+lambda*)) / sum_j q_j^(1/(1+lambda*))."""
    if lambda_star < 0.0:
        raise ValueError("lambda_star must be nonnegative")
    lq = _as_array(log_q, "log_q")
    t = 1.0 / (1.0 + lambda_star)
    a = t * (lq - lq.max())
    e = np.exp(a)
    return WeightVector(e / e.sum())


def update_weights(p, losses, config: AllocatorConfig) -> tuple[WeightVector, float]:
    """One full allocation step: dual ascent, multiplier search, projection.

    Returns the new weights and lambda*.  The output satisfies
    kl_to_uniform(new) <= rho + 1e-6, with N taken as len(p).
    """
    p_arr = floor_weights(p)
    log_q = dual_step(p_arr, losses, config.eta_b)
    constraint = KlBallConstraint(rho=config.rho, n_total=p_arr.size)
    lam = solve_lambda(log_q.values, constraint, config)
    return project(log_q.values, lam), lam
