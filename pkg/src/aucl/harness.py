"""Run filter variants on simulated scenarios and write metrics.

Every variant of a run replays the same ``Scenario`` (truth, odometry and
measurement stream), so differences between variants come from processing
alone.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .discriminator import deterministic_mode, nlos_probability
from .imm import ImmResult, sequential_update
from .network import Network, check_stamp, write_message_log
from .sim import HEADING, Scenario, propagate_dead_reckoning, simulate
from .skf import predict_bias
from .types import (LOS, Belief, BiasBook, BiasModel, ModeProbabilities, NumericalError,
                    wrap_angle)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

METRIC_COLUMNS = ("step", "time", "variant", "true_x", "true_y", "true_theta", "est_x",
                  "est_y", "est_theta", "pos_err", "nees", "p_nlos_post", "trace_P")
MEASUREMENT_COLUMNS = ("step", "observer", "target", "z", "power_metric", "true_los",
                       "true_bias", "true_distance")
ODOMETRY_COLUMNS = ("step", "agent", "v", "omega")
INITIAL_COLUMNS = ("agent", "true_x", "true_y", "true_theta", "est_x", "est_y", "est_theta")


@dataclass
class DetAudit:
    """Determinant of the prior and of each posterior for every update."""

    kind: list[str] = field(default_factory=list)
    prior: list[float] = field(default_factory=list)
    posterior: list[float] = field(default_factory=list)

    def add(self, kind: str, prior: float, posterior: float) -> None:
        self.kind.append(kind)
        self.prior.append(prior)
        self.posterior.append(posterior)

    def violations(self, tol: float = 1e-12) -> int:
        return int(np.sum(np.asarray(self.posterior) > np.asarray(self.prior) + tol))


@dataclass
class VariantResult:
    variant: str
    estimates: np.ndarray      # (steps, N, 3)
    covariances: np.ndarray    # (steps, N, 3, 3)
    p_nlos_post: np.ndarray    # (steps, N), nan where no measurement was processed
    network: Network
    audit: Optional[DetAudit]
    flags: dict[str, int]


def mode_source(variant: str, fcfg):
    if variant == "naive_uwb":
        return lambda pm: LOS
    if variant == "deterministic":
        return lambda pm: deterministic_mode(pm, fcfg.threshold)
    if variant in ("aucl", "aucl_compact"):
        return lambda pm: nlos_probability(pm, fcfg.sigmoid)
    raise ValueError(f"variant {variant!r} does not process measurements")


def run_variant(scenario: Scenario, rc: RunConfig, variant: str,
                audit: bool = False) -> VariantResult:
    world, fcfg = scenario.world, rc.filter
    ids = scenario.agent_ids
    n_agents, steps = len(ids), scenario.steps
    compact = variant == "aucl_compact"
    bias = BiasModel.from_prior(world.phi_bar, world.Phi, fcfg.bias_handling)
    beliefs = {i: Belief(scenario.initial_estimates[k], world.P0, 0, HEADING)
               for k, i in enumerate(ids)}
    books = {i: BiasBook.zeros(i, [i] if compact else ids, 3) for i in ids}
    net = Network()
    det = DetAudit() if audit else None
    flags: dict[str, int] = {}
    modes_for = None if variant == "dr_only" else mode_source(variant, fcfg)

    est = np.zeros((steps, n_agents, 3))
    cov = np.zeros((steps, n_agents, 3, 3))
    post = np.full((steps, n_agents), np.nan)

    def on_update(prior: Belief, res: ImmResult):
        d = res.diagnostics
        for flag in d.flags:
            flags[flag] = flags.get(flag, 0) + 1
        if det is None:
            return
        d0 = float(np.linalg.det(prior.P))
        for kind, out in (("los", d.out_los), ("nlos", d.out_nlos)):
            if out is not None and not out.skipped:
                det.add(kind, d0, float(np.linalg.det(out.belief.P)))
        det.add("imm", d0, float(np.linalg.det(res.belief.P)))

    for t in range(1, steps + 1):
        for k, i in enumerate(ids):
            beliefs[i], F = propagate_dead_reckoning(beliefs[i], scenario.odometry[t - 1, k],
                                                     world.Q, world.dt)
            books[i] = predict_bias(books[i], F)
        events = scenario.events[t] if modes_for is not None else []
        if events:
            net.publish(t, beliefs, books)
            updated = {}
            for k, i in enumerate(ids):
                mine = [e.meas for e in events if e.meas.observer == i]
                if not mine:
                    continue
                modes = [modes_for(m.power_metric) for m in mine]
                targets, partner_books = {}, {}
                for m, mode in zip(mine, modes):
                    j = m.target
                    if j in scenario.beacons:
                        targets[j] = scenario.beacons[j]
                        continue
                    needs_book = not compact and variant != "naive_uwb" and mode.p_nlos > 0.0
                    msg, bias_msg = net.request_exchange(i, j, needs_book)
                    check_stamp(msg, t)
                    targets[j] = msg.belief(HEADING)
                    partner_books[j] = bias_msg.book() if bias_msg is not None else None
                bel, book, diags = sequential_update(
                    beliefs[i], bias, books[i], mine, modes, targets, partner_books, fcfg.R,
                    on_update=on_update, compact=compact, combine_rule=fcfg.combine_rule,
                    likelihood_variance=fcfg.likelihood_variance)
                updated[i] = (bel, book)
                if diags:
                    post[t - 1, k] = float(np.mean([d.posterior_modes.p_nlos for d in diags]))
            for i, (bel, book) in updated.items():
                beliefs[i], books[i] = bel, book
        for k, i in enumerate(ids):
            est[t - 1, k] = beliefs[i].x
            cov[t - 1, k] = beliefs[i].P
    return VariantResult(variant, est, cov, post, net, det, flags)


# -- metrics ----------------------------------------------------------------

LOOP_GAP_FRACTION = 0.05


def loop_closed(scenario: Scenario) -> list[bool]:
    """True path ends within 5% of its length of where it started."""
    if scenario.steps == 0:
        return [False] * len(scenario.agent_ids)
    lengths = scenario.path_lengths()
    gaps = np.hypot(*(scenario.truth[-1, :, :2] - scenario.truth[0, :, :2]).T)
    return [bool(L > 0 and g <= LOOP_GAP_FRACTION * L) for L, g in zip(lengths, gaps)]


def errors(scenario: Scenario, res: VariantResult) -> tuple[np.ndarray, np.ndarray]:
    """Position error (m) and NEES per step and agent."""
    truth = scenario.truth[1:]
    e = truth - res.estimates
    e[..., HEADING] = wrap_angle(e[..., HEADING])
    pos_err = np.hypot(e[..., 0], e[..., 1])
    nees = np.einsum("tni,tni->tn", e, np.linalg.solve(res.covariances, e[..., None])[..., 0])
    return pos_err, nees


def summarize(scenario: Scenario, res: VariantResult) -> dict:
    steps = scenario.steps
    out: dict = {"messages": res.network.counts(), "flags": dict(sorted(res.flags.items()))}
    if steps == 0:
        out.update(final_rmse=None, mean_nees=None, loop_closure_pct=None,
                   loop_closure_pct_mean=None)
        return out
    pos_err, nees = errors(scenario, res)
    final = pos_err[-1]
    lengths = scenario.path_lengths()
    closed = loop_closed(scenario)
    loop = [float(e / L * 100.0) if c else None for e, L, c in zip(final, lengths, closed)]
    valid = [v for v in loop if v is not None]
    out.update(
        final_rmse=float(np.sqrt(np.mean(final ** 2))),
        final_pos_err={str(i): float(v) for i, v in zip(scenario.agent_ids, final)},
        rmse_over_time=float(np.sqrt(np.mean(pos_err ** 2))),
        mean_nees=float(np.mean(nees)),
        loop_closure_pct={str(i): v for i, v in zip(scenario.agent_ids, loop)},
        loop_closure_pct_mean=float(np.mean(valid)) if valid else None,
    )
    return out


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    scenario: Scenario
    variants: dict[str, VariantResult]

    def summary(self) -> dict:
        sc = self.scenario
        closed = {str(i): c for i, c in zip(sc.agent_ids, loop_closed(sc))}
        return {
            "config_hash": self.config.digest(),
            "seed": self.seed,
            "steps": sc.steps,
            "agents": sc.agent_ids,
            "path_length": {str(i): float(v) for i, v in zip(sc.agent_ids, sc.path_lengths())},
            "loop_closed": closed,
            "measurements": int(sum(len(e) for e in sc.events)),
            "variant_order": list(self.variants),
            "variants": {v: summarize(sc, r) for v, r in self.variants.items()},
        }


def run_scenario(rc: RunConfig, seed: int, audit: bool = False,
                 variants: Optional[Sequence[str]] = None) -> RunResult:
    scenario = simulate(rc.world, seed)
    chosen = tuple(variants) if variants is not None else rc.variants
    return RunResult(rc, seed, scenario,
                     {v: run_variant(scenario, rc, v, audit) for v in chosen})


# -- output -----------------------------------------------------------------

def _f(v: float) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = result.scenario
    dt = sc.world.dt
    errs = {v: errors(sc, r) for v, r in result.variants.items()} if sc.steps else {}
    for k, i in enumerate(sc.agent_ids):
        with open(out / f"agent_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for t in range(sc.steps):
                tru = sc.truth[t + 1, k]
                for v, r in result.variants.items():
                    est = r.estimates[t, k]
                    pe, nees = errs[v][0][t, k], errs[v][1][t, k]
                    w.writerow((t + 1, _f((t + 1) * dt), v, _f(tru[0]), _f(tru[1]), _f(tru[2]),
                                _f(est[0]), _f(est[1]), _f(est[2]), _f(pe), _f(nees),
                                _f(r.p_nlos_post[t, k]), _f(np.trace(r.covariances[t, k]))))
    with open(out / "measurements.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_COLUMNS)
        for evs in sc.events:
            for e in evs:
                m = e.meas
                w.writerow((m.stamp, m.observer, m.target, _f(m.z), _f(m.power_metric),
                            int(e.los), _f(e.bias), _f(e.distance)))
    with open(out / "initial.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INITIAL_COLUMNS)
        for k, i in enumerate(sc.agent_ids):
            w.writerow((i, *map(_f, sc.truth[0, k]), *map(_f, sc.initial_estimates[k])))
    with open(out / "odometry.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ODOMETRY_COLUMNS)
        for t in range(sc.steps):
            for k, i in enumerate(sc.agent_ids):
                w.writerow((t + 1, i, _f(sc.odometry[t, k, 0]), _f(sc.odometry[t, k, 1])))
    for v, r in result.variants.items():
        write_message_log(r.network.log, out / f"messages_{v}.csv")
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(result.config.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "summary.json", "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run(config_path, seed: Optional[int], out_dir, overrides: Iterable[str] = ()) -> int:
    try:
        rc = config_mod.load(config_path, overrides)
    except config_mod.ConfigError as exc:
        logger.error("%s", exc)
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    seed = rc.seed if seed is None else seed
    try:
        result = run_scenario(rc, seed)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_outputs(result, out_dir)
    return EXIT_OK


# -- comparison -------------------------------------------------------------

class CompareError(ValueError):
    pass


def _stats(values: list[float]) -> dict:
    if not values:
        return {"median": None, "iqr": None, "n": 0}
    a = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"median": float(med), "iqr": float(q3 - q1), "n": int(a.size)}


def compare(dirs: Sequence) -> dict:
    """Median and IQR of final RMSE and loop-closure error across runs."""
    summaries = []
    for d in dirs:
        path = Path(d) / "summary.json"
        try:
            summaries.append(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CompareError(f"cannot read {path}: {exc}") from exc
    if not summaries:
        raise CompareError("no runs to compare")
    hashes = {s["config_hash"] for s in summaries}
    if len(hashes) > 1:
        raise CompareError("runs come from different scenarios; refusing to compare")
    variants = summaries[0].get("variant_order", sorted(summaries[0]["variants"]))
    if any(set(s["variants"]) != set(variants) for s in summaries):
        raise CompareError("runs used different variant sets")
    table = {}
    for v in variants:
        rmse = [s["variants"][v]["final_rmse"] for s in summaries
                if s["variants"][v]["final_rmse"] is not None]
        loop = [s["variants"][v]["loop_closure_pct_mean"] for s in summaries
                if s["variants"][v]["loop_closure_pct_mean"] is not None]
        table[v] = {"final_rmse": _stats(rmse), "loop_closure_pct": _stats(loop)}
    return {"config_hash": hashes.pop(), "runs": len(summaries),
            "seeds": [s["seed"] for s in summaries], "variants": table}


def format_table(cmp: dict) -> str:
    def cell(s):
        return "-" if s["median"] is None else f"{s['median']:.3f} ({s['iqr']:.3f})"
    rows = [f"{'variant':<14} {'final RMSE m, median (IQR)':>28} {'loop closure %, median (IQR)':>30}"]
    for v, st in cmp["variants"].items():
        rows.append(f"{v:<14} {cell(st['final_rmse']):>28} {cell(st['loop_closure_pct']):>30}")
    return "\n".join(rows)


def parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",")]


def _sweep_one(args) -> tuple[int, int]:
    config_path, seed, out_dir, overrides = args
    return seed, run(config_path, seed, out_dir, overrides)


def sweep(config_path, seeds: Sequence[int], out_dir, overrides: Iterable[str] = (),
          jobs: int = 1) -> int:
    out = Path(out_dir)
    overrides = list(overrides)
    try:
        config_mod.load(config_path, overrides)
    except config_mod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    tasks = [(str(config_path), s, str(out / f"seed_{s:04d}"), overrides) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            codes = dict(pool.map(_sweep_one, tasks))
    else:
        codes = dict(map(_sweep_one, tasks))
    worst = max(codes.values(), default=EXIT_OK)
    done = [t[2] for t in tasks if codes[t[1]] == EXIT_OK]
    if done:
        cmp = compare(done)
        (out / "compare.json").write_text(json.dumps(cmp, indent=2, sort_keys=True) + "\n")
        print(format_table(cmp))
    return worst


def default_jobs() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
               else (os.cpu_count() or 1))
