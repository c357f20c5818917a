"""Bad-data detection with the largest normalized residual (LNR) test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

__all__ = [
    "DEFAULT_TAU",
    "CRITICAL_FLOOR",
    "ResidualAnalysis",
    "LNRResult",
    "residual_sensitivity",
    "residual_covariance",
    "normalized_residuals",
    "lnr_test",
    "threshold_from_false_alarm",
    "analyze_residuals",
]

DEFAULT_TAU = 3.0
CRITICAL_FLOOR = 1e-8


def residual_sensitivity(H: np.ndarray, W=None) -> np.ndarray:
    """S = I - H (H' W H)^-1 H' W; W may be a weight vector or omitted (unit)."""
    H = np.asarray(H, dtype=float)
    m, n = H.shape
    w = np.ones(m) if W is None else _diag(W)
    HtW = H.T * w
    G = HtW @ H
    rank = np.linalg.matrix_rank(H)
    if rank < n:
        raise np.linalg.LinAlgError(f"H has rank {rank} < {n} columns")
    return np.eye(m) - H @ np.linalg.solve(G, HtW)


def residual_covariance(S: np.ndarray, W=None, noise_variance=None) -> np.ndarray:
    """Cov(r) = S R for r = S e, e ~ N(0, R).

    R defaults to W^-1. Pass ``noise_variance`` when the noise actually
    present differs from the estimator's weighting.
    """
    m = S.shape[0]
    if noise_variance is None:
        noise_variance = 1.0 / (np.ones(m) if W is None else _diag(W))
    return S * np.broadcast_to(np.asarray(noise_variance, dtype=float), (m,))[None, :]


def normalized_residuals(
    r: np.ndarray,
    S: np.ndarray,
    W=None,
    *,
    noise_variance=None,
    exclude=None,
    floor: float = CRITICAL_FLOOR,
) -> tuple[np.ndarray, np.ndarray]:
    """r_N = D^-1/2 r with D = diag(Cov(r)).

    Returns ``(r_N, included)``. Rows whose relative residual variance
    Omega_kk / R_kk is below ``floor`` (critical measurements) and rows in
    ``exclude`` (e.g. pseudo-measurements) get NaN and ``included=False``.
    """
    r = np.asarray(r, dtype=float)
    m = r.size
    if noise_variance is None:
        noise_variance = 1.0 / (np.ones(m) if W is None else _diag(W))
    noise_variance = np.broadcast_to(np.asarray(noise_variance, dtype=float), (m,))
    D = np.diag(S) * noise_variance
    included = np.diag(S) >= floor
    if exclude is not None:
        included &= ~np.asarray(exclude, dtype=bool)
    rN = np.full(m, np.nan)
    rN[included] = r[included] / np.sqrt(D[included])
    return rN, included


@dataclass(frozen=True)
class LNRResult:
    alarm: bool
    max_index: int | None
    max_value: float
    n_alarms: int


def lnr_test(rN: np.ndarray, tau: float = DEFAULT_TAU, included=None) -> LNRResult:
    """Accept H0 iff max |r_N| over included rows is <= tau."""
    rN = np.asarray(rN, dtype=float)
    mask = ~np.isnan(rN) if included is None else np.asarray(included, dtype=bool) & ~np.isnan(rN)
    if not mask.any():
        return LNRResult(False, None, 0.0, 0)
    mag = np.where(mask, np.abs(rN), -np.inf)
    k = int(np.argmax(mag))
    return LNRResult(bool(mag[k] > tau), k, float(mag[k]), int(np.sum(mag > tau)))


def threshold_from_false_alarm(p: float, m_eff: int = 1) -> float:
    """Bonferroni two-sided threshold: Phi^-1(1 - p / (2 m_eff))."""
    if not 0 < p < 1:
        raise ValueError(f"false-alarm probability must lie in (0, 1), got {p}")
    if m_eff < 1:
        raise ValueError("m_eff must be >= 1")
    return float(norm.ppf(1.0 - p / (2.0 * m_eff)))


@dataclass(frozen=True)
class ResidualAnalysis:
    S: np.ndarray
    omega: np.ndarray
    D: np.ndarray
    rN: np.ndarray
    included: np.ndarray
    critical: np.ndarray  # indices of non-redundant measurements
    tau: float
    max_index: int | None
    max_value: float
    alarm: bool
    n_alarms: int

    def to_dict(self) -> dict:
        """JSON-ready summary; NaN entries of rN become None, indices 1-based."""
        return {
            "alarm": self.alarm,
            "tau": self.tau,
            "max_index": None if self.max_index is None else self.max_index + 1,
            "max_value": self.max_value,
            "n_alarms": self.n_alarms,
            "critical": [int(k) + 1 for k in self.critical],
            "rN": [None if np.isnan(v) else float(v) for v in self.rN],
        }


def analyze_residuals(
    H: np.ndarray,
    r: np.ndarray,
    W=None,
    *,
    tau: float = DEFAULT_TAU,
    pseudo=None,
    noise_variance=None,
) -> ResidualAnalysis:
    """Sensitivity, covariance, normalized residuals and the LNR decision in one go."""
    S = residual_sensitivity(H, W)
    m = S.shape[0]
    if noise_variance is None:
        noise_variance = 1.0 / (np.ones(m) if W is None else _diag(W))
    omega = residual_covariance(S, noise_variance=noise_variance)
    rN, included = normalized_residuals(r, S, noise_variance=noise_variance, exclude=pseudo)
    critical = np.flatnonzero(np.diag(S) < CRITICAL_FLOOR)
    if pseudo is not None:
        critical = critical[~np.asarray(pseudo, dtype=bool)[critical]]
    res = lnr_test(rN, tau, included)
    return ResidualAnalysis(
        S, omega, np.diag(omega).copy(), rN, included, critical, tau, res.max_index, res.max_value, res.alarm, res.n_alarms
    )


def _diag(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.diag(W) if W.ndim == 2 else W
