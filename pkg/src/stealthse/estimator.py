"""Weighted least-squares state estimation (Gauss-Newton and fast decoupled)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .measurement import (
    MeasurementSet,
    StateVector,
    build_dc_jacobian,
    eval_h,
    eval_jacobian,
)
from .netmodel import Network

__all__ = [
    "Mode",
    "EstimatorConfig",
    "IterationRecord",
    "EstimationResult",
    "EstimationError",
    "NotObservable",
    "Diverged",
    "ObservabilityReport",
    "estimate",
    "wls_estimate",
    "fast_decoupled_estimate",
    "observability_check",
]

V_MAX = 5.0


class Mode(str, enum.Enum):
    FULL_NEWTON = "full"
    FAST_DECOUPLED = "fast-decoupled"


@dataclass(frozen=True)
class EstimatorConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    pseudo_weight: float = 1e6
    mode: Mode = Mode.FULL_NEWTON
    start: StateVector | None = None  # None means flat start

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if self.pseudo_weight < 1:
            raise ValueError("pseudo_weight must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    step_norm: float  # ||dx||_inf
    objective: float  # J at the iterate the step was computed from
    directional_derivative: float  # grad J(x^k) . dx^k (full Newton only)


@dataclass
class EstimationResult:
    converged: bool
    iterations: int
    x_hat: StateVector
    residual: np.ndarray
    objective: float
    estimated: np.ndarray
    weights: np.ndarray
    history: list[IterationRecord] = field(default_factory=list)


class EstimationError(RuntimeError):
    pass


class NotObservable(EstimationError):
    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


class Diverged(EstimationError):
    def __init__(self, message: str, result: EstimationResult):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class ObservabilityReport:
    observable: bool
    rank: int
    n_state: int


def observability_check(network: Network, mset: MeasurementSet) -> ObservabilityReport:
    """Numerical rank of H at flat start; observable iff it equals 2N-1."""
    H = eval_jacobian(network, mset, StateVector.flat(network)).H
    rank = int(np.linalg.matrix_rank(H)) if H.size else 0
    return ObservabilityReport(rank == network.n_state, rank, network.n_state)


def estimate(network: Network, mset: MeasurementSet, config: EstimatorConfig | None = None) -> EstimationResult:
    config = config or EstimatorConfig()
    if config.mode is Mode.FAST_DECOUPLED:
        return fast_decoupled_estimate(network, mset, config)
    return wls_estimate(network, mset, config)


def _factor(G: np.ndarray, what: str, n: int):
    try:
        return scipy.linalg.cho_factor(G)
    except (np.linalg.LinAlgError, ValueError):
        rank = int(np.linalg.matrix_rank(G))
        raise NotObservable(f"{what} gain matrix is singular (rank {rank} < {n})", rank) from None


def _check_state(x: np.ndarray, n_theta: int) -> str | None:
    if not np.all(np.isfinite(x)):
        return "non-finite state"
    vm = x[n_theta:]
    if np.any(vm <= 0) or np.any(vm > V_MAX):
        return f"voltage magnitude left (0, {V_MAX:g}]"
    return None


def _result(network, mset, x, w, converged, iterations, history) -> EstimationResult:
    state = StateVector.from_array(network, x)
    hx = eval_h(network, mset, state)
    r = mset.values - hx
    return EstimationResult(converged, iterations, state, r, 0.5 * float(r @ (w * r)), hx, w, history)


def wls_estimate(network: Network, mset: MeasurementSet, config: EstimatorConfig | None = None) -> EstimationResult:
    """Gauss-Newton on the normal equations (H' W H) dx = H' W r.

    Pseudo-measurements enter as rows weighted by ``config.pseudo_weight``.
    Raises :class:`NotObservable` on a singular gain matrix and
    :class:`Diverged` (carrying the last iterate) when the iteration cap is
    hit or the state leaves the admissible region.
    """
    config = config or EstimatorConfig()
    z = mset.require_values()
    w = mset.weights(config.pseudo_weight)
    n = network.n_state
    nt = network.n_bus - 1
    x = (config.start or StateVector.flat(network)).as_array()
    history: list[IterationRecord] = []

    for it in range(1, config.max_iterations + 1):
        state = StateVector.from_array(network, x)
        H = eval_jacobian(network, mset, state).H
        r = z - eval_h(network, mset, state)
        if it == 1:
            rank = int(np.linalg.matrix_rank(H))
            if rank < n:
                raise NotObservable(f"measurement Jacobian has rank {rank} < {n}", rank)
        HtW = H.T * w
        G = HtW @ H
        rhs = HtW @ r
        dx = scipy.linalg.cho_solve(_factor(G, "WLS", n), rhs)
        # grad J = -H' W r
        history.append(IterationRecord(float(np.max(np.abs(dx))), 0.5 * float(r @ (w * r)), float(-rhs @ dx)))
        bad = _check_state(x + dx, nt)
        if bad:
            raise Diverged(bad, _result(network, mset, x, w, False, it, history))
        x = x + dx
        if history[-1].step_norm <= config.convergence_tol:
            return _result(network, mset, x, w, True, it, history)

    raise Diverged(
        f"no convergence in {config.max_iterations} iterations",
        _result(network, mset, x, w, False, config.max_iterations, history),
    )


def fast_decoupled_estimate(
    network: Network, mset: MeasurementSet, config: EstimatorConfig | None = None
) -> EstimationResult:
    """Alternate angle and magnitude corrections with constant flat-start gains.

    The angle half uses the DC Jacobian (resistances ignored) of the active
    rows; the magnitude half uses H_QV at flat start. Mismatches are
    re-evaluated at the latest estimate before each half-step.
    """
    config = config or EstimatorConfig()
    z = mset.require_values()
    w = mset.weights(config.pseudo_weight)
    nt = network.n_bus - 1
    act = mset.active
    ract = ~act
    if not act.any():
        raise NotObservable("angle half-problem has no active-power measurements", 0)
    if not ract.any():
        raise NotObservable("magnitude half-problem has no reactive or voltage measurements", 0)

    H_p = build_dc_jacobian(network, mset)
    H_q = eval_jacobian(network, mset, StateVector.flat(network)).H_QV
    HtW_p = H_p.T * w[act]
    HtW_q = H_q.T * w[ract]
    Gp = HtW_p @ H_p
    Gq = HtW_q @ H_q
    for G, name, size in ((Gp, "angle", nt), (Gq, "magnitude", nt + 1)):
        rank = int(np.linalg.matrix_rank(G))
        if rank < size:
            raise NotObservable(f"{name} half-problem gain matrix has rank {rank} < {size}", rank)
    fp = _factor(Gp, "angle", nt)
    fq = _factor(Gq, "magnitude", nt + 1)

    x = (config.start or StateVector.flat(network)).as_array()
    history: list[IterationRecord] = []
    for it in range(1, config.max_iterations + 1):
        r = z - eval_h(network, mset, StateVector.from_array(network, x))
        obj = 0.5 * float(r @ (w * r))
        dth = scipy.linalg.cho_solve(fp, HtW_p @ r[act])
        x_prev = x.copy()
        x[:nt] += dth
        bad = _check_state(x, nt)
        if not bad:
            r = z - eval_h(network, mset, StateVector.from_array(network, x))
            dv = scipy.linalg.cho_solve(fq, HtW_q @ r[ract])
            x[nt:] += dv
            bad = _check_state(x, nt)
        if bad:
            raise Diverged(bad, _result(network, mset, x_prev, w, False, it, history))
        step = float(max(np.max(np.abs(dth), initial=0.0), np.max(np.abs(dv))))
        history.append(IterationRecord(step, obj, float("nan")))
        if step <= config.convergence_tol:
            return _result(network, mset, x, w, True, it, history)

    raise Diverged(
        f"no convergence in {config.max_iterations} iterations",
        _result(network, mset, x, w, False, config.max_iterations, history),
    )
