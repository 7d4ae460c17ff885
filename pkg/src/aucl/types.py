"""Value types shared by the filters, the simulator and the harness.

All containers are frozen dataclasses holding read-only numpy arrays, so a
belief handed to another agent can never be mutated behind its owner's back.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

PSD_TOL = 1e-9
MODE_SUM_TOL = 1e-12

# Number of covariance constructions whose smallest eigenvalue was below
# -PSD_TOL and had to be clipped.  Read through psd_clip_count().
_psd_clip_events = 0


class ConstructionError(ValueError):
    """Raised when a value object is built from invalid data."""


class NumericalError(ArithmeticError):
    """Raised when a filter update cannot be computed reliably."""


class DegenerateGeometryError(NumericalError):
    """Raised when two range endpoints are (numerically) coincident."""


def psd_clip_count() -> int:
    return _psd_clip_events


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi)
    out = np.pi - wrapped
    if np.ndim(out) == 0:
        return float(out)
    return out


def make_covariance(raw) -> np.ndarray:
    """Return a symmetric positive semidefinite copy of ``raw``.

    The matrix is symmetrized as (raw + raw.T) / 2.  If any eigenvalue is
    negative it is clipped to zero; clips larger than PSD_TOL are counted
    (see ``psd_clip_count``) since they point at an upstream numerical issue.
    """
    global _psd_clip_events
    a = np.array(raw, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConstructionError(f"covariance must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConstructionError("covariance has non-finite entries")
    a = 0.5 * (a + a.T)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(a)
        if w[0] < 0.0:
            if w[0] < -PSD_TOL:
                _psd_clip_events += 1
                logger.debug("clipped covariance eigenvalue %.3e", w[0])
            a = (V * np.maximum(w, 0.0)) @ V.T
            a = 0.5 * (a + a.T)
            np.fill_diagonal(a, np.maximum(np.diag(a), 0.0))
    return _frozen(a)


def _state_vector(x, heading: Optional[int]) -> np.ndarray:
    v = np.array(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ConstructionError("state vector has non-finite entries")
    if heading is not None:
        v[heading] = wrap_angle(v[heading])
    return _frozen(v)


@dataclass(frozen=True)
class Belief:
    """State estimate ``x`` with error covariance ``P`` at time step ``stamp``.

    ``heading`` is the index of an angular component to keep wrapped, or None
    for purely Euclidean states.
    """

    x: np.ndarray
    P: np.ndarray
    stamp: int = 0
    heading: Optional[int] = None

    def __post_init__(self):
        x = _state_vector(self.x, self.heading)
        P = self.P
        if not (isinstance(P, np.ndarray) and not P.flags.writeable):
            P = make_covariance(np.atleast_2d(P))
        if P.shape != (x.size, x.size):
            raise ConstructionError(
                f"state has {x.size} entries but covariance is {P.shape}")
        if self.stamp < 0:
            raise ConstructionError("stamp must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def position(self) -> np.ndarray:
        return self.x[: min(2, self.x.size)]

    def replace(self, x=None, P=None, stamp=None) -> "Belief":
        return Belief(self.x if x is None else x,
                      self.P if P is None else P,
                      self.stamp if stamp is None else stamp,
                      self.heading)


@dataclass(frozen=True)
class BiasModel:
    """NLoS bias statistics of one observing agent.

    ``b_hat`` and ``B`` are the running estimate and its second moment; the
    Schmidt update never changes them.
    """

    phi_bar: float
    Phi: float
    b_hat: float
    B: float

    def __post_init__(self):
        if not self.Phi > 0.0:
            raise ConstructionError("bias variance Phi must be positive")
        if not self.B >= 0.0:
            raise ConstructionError("bias second moment B must be >= 0")

    @classmethod
    def from_prior(cls, phi_bar: float, Phi: float,
                   handling: str = "second_moment") -> "BiasModel":
        """Initialise from the bias prior N(phi_bar, Phi).

        ``second_moment`` keeps b_hat = 0 and folds the mean into
        B = phi_bar**2 + Phi.  ``mean_subtracted`` sets b_hat = phi_bar, B = Phi.
        """
        if handling == "second_moment":
            return cls(phi_bar, Phi, 0.0, phi_bar * phi_bar + Phi)
        if handling == "mean_subtracted":
            return cls(phi_bar, Phi, phi_bar, Phi)
        raise ConstructionError(f"unknown bias handling {handling!r}")


@dataclass(frozen=True)
class BiasBook:
    """Cross-covariances between the owner's state and every agent's bias.

    ``C[l]`` is E[(x_owner - x_hat_owner)(b_l - b_hat_l)] as a length-n vector.
    Missing keys read as zero.
    """

    owner: int
    C: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        entries = {}
        for k, v in self.C.items():
            a = np.array(v, dtype=float).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ConstructionError(f"bias book entry {k} is not finite")
            entries[int(k)] = _frozen(a)
        object.__setattr__(self, "C", dict(sorted(entries.items())))

    @classmethod
    def zeros(cls, owner: int, agent_ids, n: int) -> "BiasBook":
        return cls(owner, {int(l): np.zeros(n) for l in agent_ids})

    def get(self, l: int, n: int) -> np.ndarray:
        v = self.C.get(l)
        return np.zeros(n) if v is None else v

    def with_entries(self, updates: Mapping[int, np.ndarray]) -> "BiasBook":
        merged = dict(self.C)
        merged.update(updates)
        return BiasBook(self.owner, merged)


@dataclass(frozen=True)
class ModeProbabilities:
    p_los: float
    p_nlos: float

    def __post_init__(self):
        for p in (self.p_los, self.p_nlos):
            if not (0.0 <= p <= 1.0):
                raise ConstructionError(f"mode probability {p} outside [0, 1]")
        if abs(self.p_los + self.p_nlos - 1.0) > MODE_SUM_TOL:
            raise ConstructionError("mode probabilities must sum to 1")

    @classmethod
    def from_nlos(cls, p_nlos: float) -> "ModeProbabilities":
        p = min(max(float(p_nlos), 0.0), 1.0)
        return cls(1.0 - p, p)

    def as_tuple(self) -> tuple[float, float]:
        return (self.p_los, self.p_nlos)


LOS = ModeProbabilities(1.0, 0.0)
NLOS = ModeProbabilities(0.0, 1.0)


@dataclass(frozen=True)
class RangeMeasurement:
    observer: int
    target: int
    z: float
    power_metric: float
    stamp: int

    def __post_init__(self):
        if not (math.isfinite(self.z) and self.z >= 0.0):
            raise ConstructionError("range must be finite and non-negative")
        if self.observer == self.target:
            raise ConstructionError("observer and target must differ")


@dataclass(frozen=True)
class Agent:
    """Marker for a mobile UWB node."""


@dataclass(frozen=True)
class Beacon:
    """A UWB node fixed at a known planar position."""

    position: tuple[float, float]

    def __post_init__(self):
        p = tuple(float(v) for v in self.position)
        if len(p) != 2 or not all(math.isfinite(v) for v in p):
            raise ConstructionError("beacon position must be a finite 2-vector")
        object.__setattr__(self, "position", p)


NodeKind = Union[Agent, Beacon]


@dataclass(frozen=True)
class UpdateOutcome:
    """Result of one mode-conditioned range update.

    ``innovation_var`` is the innovation variance the gain was computed with
    (infinite when the update was skipped or the optimal weight left the prior
    untouched).  ``nominal_var`` is the same quantity with the conservative
    inflation removed, used only for mode likelihoods when so configured.
    """

    belief: Belief
    omega_star: float
    gain: np.ndarray
    innovation: float
    innovation_var: float
    likelihood: float
    nominal_var: float = math.nan
    skipped: bool = False
    reason: str = ""

    def __post_init__(self):
        if not self.innovation_var > 0.0:
            raise ConstructionError("innovation variance must be positive")
        if not self.likelihood >= 0.0:
            raise ConstructionError("likelihood must be non-negative")
        object.__setattr__(self, "gain", _frozen(np.array(self.gain, dtype=float)))


def skipped_outcome(bel: Belief, reason: str) -> UpdateOutcome:
    return UpdateOutcome(bel, 1.0, np.zeros(bel.n), 0.0, math.inf, 0.0,
                         math.inf, skipped=True, reason=reason)
