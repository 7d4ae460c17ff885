"""NLoS range updates with a Schmidt (consider) bias state.

The observer's bias enters the gain through its second moment ``B`` and the
state-bias cross-covariances, but the bias estimate itself is never updated.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._common import gaussian_likelihood
from .dmv import (BoundFamily, OptimizationError, RangeJacobians, apply_bound_update,
                  best_omega, range_linearize)
from .types import (Beacon, Belief, BiasBook, BiasModel, DegenerateGeometryError,
                    NumericalError, UpdateOutcome, make_covariance, skipped_outcome)

logger = logging.getLogger(__name__)

S_MIN = 1e-12

# Cross-covariances that had to be read as zero because the partner's book
# did not carry them.
_missing_entries = 0


def missing_entry_count() -> int:
    return _missing_entries


def predict_bias(book: BiasBook, F: np.ndarray) -> BiasBook:
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("transition Jacobian must be finite")
    return BiasBook(book.owner, {l: F @ C for l, C in book.C.items()})


def update_book(book_i: BiasBook, book_j: Optional[BiasBook], K: np.ndarray,
                jac: RangeJacobians, B_own: Optional[float] = None) -> BiasBook:
    """Push every C^{il} through x+ = x + K (z - z_hat).

    C^{il+} = (I - K H_i) C^{il} - K H_j C^{jl}, minus K B for the observer's
    own bias when the measurement carried it.  ``book_j`` is None for beacon
    targets.
    """
    n = K.size
    keys = set(book_i.C)
    if book_j is not None:
        keys |= set(book_j.C)
    out = {}
    for l in sorted(keys):
        C = book_i.get(l, n)
        C_new = C - K * float(jac.H_i @ C)
        if book_j is not None:
            C_new = C_new - K * float(jac.H_j @ book_j.get(l, jac.H_j.size))
        if B_own is not None and l == book_i.owner:
            C_new = C_new - K * B_own
        out[l] = C_new
    return BiasBook(book_i.owner, out)


def _partner_entry(book_j: Optional[BiasBook], i: int, n_j: int) -> np.ndarray:
    global _missing_entries
    if book_j is None or i not in book_j.C:
        _missing_entries += 1
        logger.debug("no C^{ji} for observer %s; using zero", i)
        return np.zeros(n_j)
    return book_j.C[i]


def _precompute(bel_i: Belief, C_ii: np.ndarray):
    try:
        cf = cho_factor(bel_i.P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("prior covariance is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    q = float(C_ii @ cho_solve(cf, C_ii))
    return logdet, q


def nlos_correct(bel_i: Belief, bel_j: Belief, bias_i: BiasModel, book_i: BiasBook,
                 book_j: Optional[BiasBook], z: float, R: float,
                 jac: RangeJacobians | None = None) -> tuple[UpdateOutcome, BiasBook]:
    """Inter-agent NLoS update; returns the outcome and observer's new book."""
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    if jac is None:
        try:
            jac = range_linearize(bel_i, bel_j)
        except DegenerateGeometryError as exc:
            return skipped_outcome(bel_i, str(exc)), book_i
    i = book_i.owner
    P_i = bel_i.P
    C_ii = book_i.get(i, bel_i.n)
    C_ji = _partner_entry(book_j, i, bel_j.n)
    PH = P_i @ jac.H_i
    a = float(jac.H_i @ PH)
    c = float(jac.H_j @ bel_j.P @ jac.H_j)
    hc = float(jac.H_i @ C_ii)
    jc = float(jac.H_j @ C_ji)
    logdet, q = _precompute(bel_i, C_ii)
    family = BoundFamily(logdet, bel_i.n, s_i=a, c=c,
                         s_0=2.0 * hc + 2.0 * jc + bias_i.B + R,
                         q_i=a, q_0=2.0 * hc, q_1=q)
    try:
        w = best_omega(family)
    except OptimizationError as exc:
        return skipped_outcome(bel_i, str(exc)), book_i
    S = family.S(w)
    if not S > S_MIN:
        return skipped_outcome(bel_i, f"innovation variance {S:.3g} not positive"), book_i
    innovation = z - (jac.z_hat + bias_i.b_hat)
    nominal = a + c + 2.0 * hc + 2.0 * jc + bias_i.B + R
    out = apply_bound_update(bel_i, w, PH / w + C_ii, S, innovation, nominal)
    book_new = update_book(book_i, book_j, out.gain, jac, B_own=bias_i.B)
    return out, book_new


def nlos_correct_compact(bel_i: Belief, bel_j: Belief, bias_i: BiasModel, C_ii,
                         z: float, R: float, jac: RangeJacobians | None = None
                         ) -> tuple[UpdateOutcome, np.ndarray]:
    """NLoS update that only needs the partner's belief.

    The observer's whole (state, bias) block is scaled by 1 / w in the bound,
    which removes both the inter-agent cross-covariance and C^{ji}; only the
    observer's own C^{ii} is carried.
    """
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    C_ii = np.asarray(C_ii, dtype=float).reshape(-1)
    if jac is None:
        try:
            jac = range_linearize(bel_i, bel_j)
        except DegenerateGeometryError as exc:
            return skipped_outcome(bel_i, str(exc)), C_ii
    P_i = bel_i.P
    PH = P_i @ jac.H_i
    a = float(jac.H_i @ PH)
    c = float(jac.H_j @ bel_j.P @ jac.H_j)
    hc = float(jac.H_i @ C_ii)
    logdet, q = _precompute(bel_i, C_ii)
    family = BoundFamily(logdet, bel_i.n, s_i=a + 2.0 * hc + bias_i.B, c=c, s_0=R,
                         q_i=a + 2.0 * hc + q)
    try:
        w = best_omega(family)
    except OptimizationError as exc:
        return skipped_outcome(bel_i, str(exc)), C_ii
    S = family.S(w)
    if not S > S_MIN:
        return skipped_outcome(bel_i, f"innovation variance {S:.3g} not positive"), C_ii
    innovation = z - (jac.z_hat + bias_i.b_hat)
    nominal = a + c + 2.0 * hc + bias_i.B + R
    out = apply_bound_update(bel_i, w, (PH + C_ii) / w, S, innovation, nominal)
    K = out.gain
    C_new = (C_ii - K * hc - K * bias_i.B) / w
    return out, C_new


def beacon_los_correct(bel_i: Belief, beacon_pos, z: float, R: float) -> UpdateOutcome:
    """Plain first-order update against a beacon, Joseph form covariance."""
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    try:
        jac = range_linearize(bel_i, _as_beacon(beacon_pos))
    except DegenerateGeometryError as exc:
        return skipped_outcome(bel_i, str(exc))
    P = bel_i.P
    H = jac.H_i
    PH = P @ H
    S = float(H @ PH) + R
    K = PH / S
    innovation = z - jac.z_hat
    A = np.eye(bel_i.n) - np.outer(K, H)
    P_new = make_covariance(A @ P @ A.T + R * np.outer(K, K))
    return UpdateOutcome(bel_i.replace(x=bel_i.x + K * innovation, P=P_new), 1.0, K,
                         innovation, S, gaussian_likelihood(innovation, S), S)


def beacon_nlos_correct(bel_i: Belief, bias_i: BiasModel, C_ii, beacon_pos, z: float,
                        R: float) -> tuple[UpdateOutcome, np.ndarray]:
    if not R > 0.0:
        raise ValueError("measurement variance R must be positive")
    C_ii = np.asarray(C_ii, dtype=float).reshape(-1)
    try:
        jac = range_linearize(bel_i, _as_beacon(beacon_pos))
    except DegenerateGeometryError as exc:
        return skipped_outcome(bel_i, str(exc)), C_ii
    P = bel_i.P
    H = jac.H_i
    U = P @ H + C_ii
    hc = float(H @ C_ii)
    S = float(H @ P @ H) + 2.0 * hc + bias_i.B + R
    if not S > S_MIN:
        return skipped_outcome(bel_i, f"innovation variance {S:.3g} not positive"), C_ii
    K = U / S
    innovation = z - (jac.z_hat + bias_i.b_hat)
    P_new = make_covariance(P - np.outer(U, U) / S)
    out = UpdateOutcome(bel_i.replace(x=bel_i.x + K * innovation, P=P_new), 1.0, K,
                        innovation, S, gaussian_likelihood(innovation, S), S)
    return out, C_ii - K * hc - K * bias_i.B


def _as_beacon(pos) -> Beacon:
    return pos if isinstance(pos, Beacon) else Beacon(tuple(np.asarray(pos, dtype=float)))
