"""Synthetic world: ground truth, noisy odometry, occlusion and UWB ranging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .types import Beacon, Belief, RangeMeasurement, make_covariance, wrap_angle

HEADING = 2


@dataclass(frozen=True)
class AgentSpec:
    id: int
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 1.0


@dataclass(frozen=True)
class BeaconSpec:
    id: int
    position: tuple[float, float]


@dataclass(frozen=True)
class WorldConfig:
    agents: tuple[AgentSpec, ...]
    beacons: tuple[BeaconSpec, ...] = ()
    obstacles: tuple[tuple[tuple[float, float], tuple[float, float]], ...] = ()
    dt: float = 0.5
    duration: float = 250.0
    sigma_v: float = 0.05
    sigma_omega: float = 0.02
    R: float = 0.01
    phi_bar: float = 1.0
    Phi: float = 0.25
    pm_mu_los: float = 3.0
    pm_mu_nlos: float = 10.0
    sigma_pm: float = 1.5
    sensing_range: float = 30.0
    measurement_interval: int = 1
    max_measurements_per_step: Optional[int] = None
    max_turn_rate: float = 1.0
    initial_sigma_pos: float = 0.1
    initial_sigma_heading: float = 0.02

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not self.sensing_range > 0.0:
            raise ValueError("sensing_range must be positive")
        for name in ("sigma_v", "sigma_omega", "sigma_pm", "initial_sigma_pos",
                     "initial_sigma_heading"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.duration < 0.0:
            raise ValueError("duration must be non-negative")
        if self.measurement_interval < 1:
            raise ValueError("measurement_interval must be >= 1")
        ids = [a.id for a in self.agents] + [b.id for b in self.beacons]
        if len(ids) != len(set(ids)):
            raise ValueError("node ids must be unique")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.sigma_v ** 2, self.sigma_omega ** 2])

    @property
    def P0(self) -> np.ndarray:
        s = self.initial_sigma_pos
        return np.diag([s * s, s * s, self.initial_sigma_heading ** 2])


# -- motion model -----------------------------------------------------------

def unicycle(x, u, dt: float) -> np.ndarray:
    px, py, th = x
    v, om = u
    return np.array([px + v * dt * math.cos(th), py + v * dt * math.sin(th),
                     wrap_angle(th + om * dt)])


def motion_jacobians(x, u, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State Jacobian F and input Jacobian G of ``unicycle``."""
    th = x[HEADING]
    v = u[0]
    c, s = math.cos(th), math.sin(th)
    F = np.array([[1.0, 0.0, -v * dt * s],
                  [0.0, 1.0, v * dt * c],
                  [0.0, 0.0, 1.0]])
    G = np.array([[dt * c, 0.0],
                  [dt * s, 0.0],
                  [0.0, dt]])
    return F, G


def propagate_dead_reckoning(bel: Belief, odom, Q, dt: float) -> tuple[Belief, np.ndarray]:
    """Propagate a planar pose belief with measured (v, omega).

    Returns the new belief (stamp advanced by one) and F for the bias book.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    F, G = motion_jacobians(bel.x, odom, dt)
    P = F @ bel.P @ F.T + G @ np.asarray(Q, dtype=float) @ G.T
    out = Belief(unicycle(bel.x, odom, dt), make_covariance(P), bel.stamp + 1, HEADING)
    return out, F


# -- occlusion --------------------------------------------------------------

def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _within(ax, ay, bx, by, cx, cy):
    return ((np.minimum(ax, bx) <= cx) & (cx <= np.maximum(ax, bx))
            & (np.minimum(ay, by) <= cy) & (cy <= np.maximum(ay, by)))


def line_of_sight(p_a, p_b, obstacles) -> bool:
    """True iff segment p_a-p_b touches none of the obstacle segments.

    Touching an obstacle, even at an endpoint or collinearly, counts as
    blocked.
    """
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 2, 2)
    if obs.shape[0] == 0:
        return True
    ax, ay = float(p_a[0]), float(p_a[1])
    bx, by = float(p_b[0]), float(p_b[1])
    cx, cy = obs[:, 0, 0], obs[:, 0, 1]
    dx, dy = obs[:, 1, 0], obs[:, 1, 1]
    o1 = np.sign(_orient(ax, ay, bx, by, cx, cy))
    o2 = np.sign(_orient(ax, ay, bx, by, dx, dy))
    o3 = np.sign(_orient(cx, cy, dx, dy, ax, ay))
    o4 = np.sign(_orient(cx, cy, dx, dy, bx, by))
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _within(ax, ay, bx, by, cx, cy)
    hit |= (o2 == 0) & _within(ax, ay, bx, by, dx, dy)
    hit |= (o3 == 0) & _within(cx, cy, dx, dy, ax, ay)
    hit |= (o4 == 0) & _within(cx, cy, dx, dy, bx, by)
    return not bool(np.any(hit))


# -- ranging ----------------------------------------------------------------

def sample_positive_bias(rng: np.random.Generator, phi_bar: float, Phi: float,
                         size: Optional[int] = None):
    """Draw from N(phi_bar, Phi) truncated to [0, inf) by rejection."""
    sd = math.sqrt(max(Phi, 0.0))
    if sd == 0.0:
        v = max(phi_bar, 0.0)
        return v if size is None else np.full(size, v)
    if size is None:
        while True:
            b = rng.normal(phi_bar, sd)
            if b >= 0.0:
                return float(b)
    out = np.empty(0)
    while out.size < size:
        draw = rng.normal(phi_bar, sd, size=size)
        out = np.concatenate([out, draw[draw >= 0.0]])
    return out[:size]


@dataclass(frozen=True)
class MeasurementEvent:
    meas: RangeMeasurement
    los: bool
    bias: float
    distance: float


def synthesize_measurement(p_obs, p_tgt, observer: int, target: int, stamp: int, los: bool,
                           world: WorldConfig, rng: np.random.Generator
                           ) -> Optional[MeasurementEvent]:
    """Noisy range plus power metric, or None if the target is out of range.

    The noise is drawn before the bias so a LoS and an NLoS realisation with
    the same generator state share their noise draw.
    """
    d = math.hypot(p_obs[0] - p_tgt[0], p_obs[1] - p_tgt[1])
    if d > world.sensing_range:
        return None
    nu = rng.normal(0.0, math.sqrt(world.R)) if world.R > 0.0 else 0.0
    bias = 0.0 if los else sample_positive_bias(rng, world.phi_bar, world.Phi)
    mu = world.pm_mu_los if los else world.pm_mu_nlos
    pm = rng.normal(mu, world.sigma_pm) if world.sigma_pm > 0.0 else mu
    z = max(d + nu + bias, 0.0)
    return MeasurementEvent(RangeMeasurement(observer, target, z, float(pm), stamp),
                            los, float(bias), d)


# -- scenario ---------------------------------------------------------------

@dataclass
class Scenario:
    """One realisation of the world shared by every filter variant."""

    world: WorldConfig
    agent_ids: list[int]
    beacons: dict[int, Beacon]
    truth: np.ndarray            # (steps + 1, N, 3)
    odometry: np.ndarray         # (steps, N, 2) measured (v, omega)
    initial_estimates: np.ndarray  # (N, 3)
    events: list[list[MeasurementEvent]] = field(default_factory=list)  # index = stamp

    @property
    def steps(self) -> int:
        return self.odometry.shape[0]

    def path_lengths(self) -> np.ndarray:
        d = np.diff(self.truth[:, :, :2], axis=0)
        return np.sum(np.hypot(d[..., 0], d[..., 1]), axis=0)


class _Follower:
    """Waypoint-following true controls for one agent."""

    def __init__(self, spec: AgentSpec, world: WorldConfig):
        self.wps = [np.asarray(w, dtype=float) for w in spec.waypoints]
        self.speed = spec.speed
        self.world = world
        self.k = 1 % len(self.wps)

    def initial_pose(self) -> np.ndarray:
        p = self.wps[0]
        q = self.wps[self.k]
        return np.array([p[0], p[1], math.atan2(q[1] - p[1], q[0] - p[0])])

    def control(self, x) -> tuple[float, float]:
        dt = self.world.dt
        if len(self.wps) == 1:
            return 0.0, 0.0
        tgt = self.wps[self.k]
        if math.hypot(tgt[0] - x[0], tgt[1] - x[1]) <= self.speed * dt:
            self.k = (self.k + 1) % len(self.wps)
            tgt = self.wps[self.k]
        err = wrap_angle(math.atan2(tgt[1] - x[1], tgt[0] - x[0]) - x[HEADING])
        lim = self.world.max_turn_rate
        return self.speed, float(np.clip(err / dt, -lim, lim))


def simulate(world: WorldConfig, seed: int) -> Scenario:
    rng = np.random.default_rng(seed)
    agents = sorted(world.agents, key=lambda a: a.id)
    ids = [a.id for a in agents]
    beacons = {b.id: Beacon(b.position) for b in sorted(world.beacons, key=lambda b: b.id)}
    followers = [_Follower(a, world) for a in agents]
    n_agents, steps = len(agents), world.steps

    truth = np.zeros((steps + 1, n_agents, 3))
    truth[0] = [f.initial_pose() for f in followers]
    L0 = np.linalg.cholesky(world.P0)
    init = truth[0] + rng.standard_normal((n_agents, 3)) @ L0.T
    init[:, HEADING] = wrap_angle(init[:, HEADING])

    odom = np.zeros((steps, n_agents, 2))
    noise_sd = np.array([world.sigma_v, world.sigma_omega])
    events: list[list[MeasurementEvent]] = [[]]
    for t in range(1, steps + 1):
        for k, f in enumerate(followers):
            u = f.control(truth[t - 1, k])
            truth[t, k] = unicycle(truth[t - 1, k], u, world.dt)
            odom[t - 1, k] = np.asarray(u) + noise_sd * rng.standard_normal(2)
        events.append(_measure(world, t, ids, beacons, truth[t], rng)
                      if t % world.measurement_interval == 0 else [])
    return Scenario(world, ids, beacons, truth, odom, init, events)


def _measure(world, t, ids, beacons, poses, rng) -> list[MeasurementEvent]:
    positions = {i: poses[k, :2] for k, i in enumerate(ids)}
    positions.update({b: np.asarray(beacon.position) for b, beacon in beacons.items()})
    nodes = sorted(positions)
    out = []
    for obs in ids:
        taken = 0
        for tgt in nodes:
            if tgt == obs:
                continue
            cap = world.max_measurements_per_step
            if cap is not None and taken >= cap:
                break
            p_o, p_t = positions[obs], positions[tgt]
            if math.hypot(*(p_o - p_t)) > world.sensing_range:
                continue
            los = line_of_sight(p_o, p_t, world.obstacles)
            ev = synthesize_measurement(p_o, p_t, obs, tgt, t, los, world, rng)
            if ev is not None:
                out.append(ev)
                taken += 1
    return out
