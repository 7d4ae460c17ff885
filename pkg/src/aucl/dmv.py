"""Loosely coupled LoS range update with an omega-weighted covariance bound.

The unknown cross-covariance between the two agents is replaced by the bound
diag(P_i / w, P_j / (1 - w)); the gain minimises the trace of the resulting
bound and w is picked to minimise its log-determinant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ._common import gaussian_likelihood
from .types import (Beacon, Belief, DegenerateGeometryError, NumericalError,
                    UpdateOutcome, make_covariance, skipped_outcome)

OMEGA_LO = 1e-3
OMEGA_HI = 1.0 - 1e-3
D_MIN = 1e-6
GRID_POINTS = 64
GOLDEN_TOL = 1e-9

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class OptimizationError(NumericalError):
    pass


@dataclass(frozen=True)
class RangeJacobians:
    """Row Jacobians of h = ||p_i - p_j|| and the predicted range."""

    H_i: np.ndarray
    H_j: np.ndarray
    z_hat: float


def range_linearize(bel_i: Belief, target: Union[Belief, Beacon, np.ndarray],
                    d_min: float = D_MIN) -> RangeJacobians:
    if isinstance(target, Belief):
        p_j, n_j = target.position, target.n
    else:
        p_j = np.asarray(target.position if isinstance(target, Beacon) else target,
                         dtype=float).reshape(-1)
        n_j = p_j.size
    p_i = bel_i.position
    if p_i.size != p_j.size:
        raise ValueError("position dimensions of the two nodes differ")
    d = p_i - p_j
    r = math.sqrt(float(d @ d))
    if r < d_min:
        raise DegenerateGeometryError(f"nodes are {r:.3g} m apart")
    u = d / r
    H_i = np.zeros(bel_i.n)
    H_i[: u.size] = u
    H_j = np.zeros(n_j)
    H_j[: u.size] = -u
    return RangeJacobians(H_i, H_j, r)


def los_bound_covariance(P_i, P_j, jac: RangeJacobians, R: float, omega: float) -> np.ndarray:
    """Bound covariance in information form, evaluated literally."""
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    if omega == 1.0:
        return make_covariance(P_i)
    P_i = np.asarray(P_i, dtype=float)
    c = float(jac.H_j @ np.asarray(P_j, dtype=float) @ jac.H_j)
    try:
        info = (omega * np.linalg.inv(P_i)
                + (1.0 - omega) * np.outer(jac.H_i, jac.H_i) / (c + (1.0 - omega) * R))
        return make_covariance(np.linalg.inv(info))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"bound covariance is singular: {exc}") from exc


def _golden(f: Callable[[float], float], a: float, b: float, tol: float) -> float:
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        # ties keep the left part so the smaller omega wins
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def optimize_omega(objective: Callable, lo: float = OMEGA_LO, hi: float = OMEGA_HI, *,
                   grid_points: int = GRID_POINTS, tol: float = GOLDEN_TOL,
                   vectorized: bool = False) -> float:
    """Minimise a scalar objective on [lo, hi].

    A coarse grid guards against multiple local minima; golden-section search
    then refines inside the two grid cells around the best grid point.  Ties
    resolve to the smallest omega.  With ``vectorized`` the objective is
    called once on the whole grid array.
    """
    grid = np.linspace(lo, hi, grid_points)
    if vectorized:
        values = np.asarray(objective(grid), dtype=float)
    else:
        values = np.array([objective(float(w)) for w in grid], dtype=float)
    values = np.where(np.isfinite(values), values, np.inf)
    if not np.any(np.isfinite(values)):
        raise OptimizationError("objective is not finite anywhere on the interval")
    k = int(np.argmin(values))

    def f(w):
        v = float(objective(w))
        return v if math.isfinite(v) else math.inf

    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, grid_points - 1)]
    w = _golden(f, a, b, tol)
    if f(w) < values[k]:
        return float(w)
    return float(grid[k])


@dataclass(frozen=True)
class BoundFamily:
    """log det of P(w) = P_i / w - u(w) u(w)^T / S(w) for a scalar measurement.

    With S(w) = s_i / w + c / (1 - w) + s_0 and u^T (P_i / w)^-1 u written as
    q_i / w + q_0 + q_1 w, the determinant follows from the rank-one update
    identity, so the objective costs a few flops per omega.
    """

    logdet_P: float
    n: int
    s_i: float
    c: float
    s_0: float
    q_i: float
    q_0: float = 0.0
    q_1: float = 0.0

    def S(self, w):
        w = np.asarray(w, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            c_term = self.c / (1.0 - w) if self.c > 0.0 else 0.0 * w
            out = self.s_i / w + c_term + self.s_0
        return float(out) if out.ndim == 0 else out

    def _log_det_scalar(self, w: float) -> float:
        if self.c > 0.0:
            if w >= 1.0:
                return math.inf if w > 1.0 else self.logdet_P
            S = self.s_i / w + self.c / (1.0 - w) + self.s_0
        else:
            S = self.s_i / w + self.s_0
        if not S > 0.0 or w <= 0.0:
            return math.inf
        ratio = (self.q_i / w + self.q_0 + self.q_1 * w) / S
        if not ratio < 1.0:
            return math.inf
        return self.logdet_P - self.n * math.log(w) + math.log1p(-ratio)

    def log_det(self, w):
        if isinstance(w, float):
            return self._log_det_scalar(w)
        w = np.asarray(w, dtype=float)
        S = np.asarray(self.S(w))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (self.q_i / w + self.q_0 + self.q_1 * w) / S
            val = self.logdet_P - self.n * np.log(w) + np.log1p(-ratio)
        out = np.where((ratio < 1.0) & (S > 0.0), val, np.inf)
        return float(out) if out.ndim == 0 else out


def logdet_spd(P: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(P)
    if sign <= 0:
        raise NumericalError("prior covariance is not positive definite")
    return float(val)


def best_omega(family: BoundFamily) -> float:
    """Interior minimiser, or 1.0 when leaving the prior untouched is no worse."""
    try:
        w = optimize_omega(family.log_det, vectorized=True)
    except OptimizationError:
        w = None
    at_one = family.log_det(1.0)
    if w is None:
        if not math.isfinite(at_one):
            raise OptimizationError("no admissible omega")
        return 1.0
    return 1.0 if at_one < family.log_det(w) else w


def apply_bound_update(bel: Belief, w: float, u: np.ndarray, S: float, innovation: float,
                       nominal_var: float) -> UpdateOutcome:
    """x+ = x + K r and P+ = P / w - u u^T / S with K = u / S."""
    if math.isinf(S):
        K = np.zeros(bel.n)
        P_new = bel.P
    else:
        K = u / S
        P_new = make_covariance(bel.P / w - np.outer(u, u) / S)
    x_new = bel.x + K * innovation
    return UpdateOutcome(bel.replace(x=x_new, P=P_new), w, K, innovation, S,
                         gaussian_likelihood(innovation, S), nominal_var)


def los_correct(bel_i: Belief, bel_j: Belief, z: float, R: float,
                jac: RangeJacobians | None = None) -> UpdateOutcome:
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    if jac is None:
        try:
            jac = range_linearize(bel_i, bel_j)
        except DegenerateGeometryError as exc:
            return skipped_outcome(bel_i, str(exc))
    P_i = bel_i.P
    PH = P_i @ jac.H_i
    a = float(jac.H_i @ PH)
    c = float(jac.H_j @ bel_j.P @ jac.H_j)
    family = BoundFamily(logdet_spd(P_i), bel_i.n, s_i=a, c=c, s_0=R, q_i=a)
    try:
        w = best_omega(family)
    except OptimizationError as exc:
        return skipped_outcome(bel_i, str(exc))
    return apply_bound_update(bel_i, w, PH / w, family.S(w), z - jac.z_hat, a + c + R)
