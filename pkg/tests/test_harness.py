import csv
import json
import math
import statistics
from pathlib import Path

import numpy as np
import pytest

from aucl import cli, harness
from aucl.network import BELIEF, BIAS_BOOK, read_message_log
from aucl.types import NumericalError

SMALL = {
    "schema_version": 1,
    "seed": 3,
    "world": {
        "dt": 0.5, "duration": 20,
        "agents": [{"id": 1, "waypoints": [[0, 0], [6, 0], [6, 6], [0, 6]]},
                   {"id": 2, "waypoints": [[8, 1], [8, 8], [2, 8]]}],
        "beacons": [{"id": 50, "position": [-3, -3]}],
        "obstacles": [[[3, -2], [3, 2]], [[5, 5], [7, 7]]],
        "sensing_range": 30,
    },
}


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL, indent=2))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_documented_outputs(small, tmp_path):
    out = tmp_path / "run"
    assert harness.run(small, None, out) == 0
    names = {p.name for p in out.iterdir()}
    assert {"agent_1.csv", "agent_2.csv", "measurements.csv", "odometry.csv", "initial.csv",
            "summary.json", "config.resolved.json"} <= names
    assert {f"messages_{v}.csv" for v in harness.config_mod.VARIANTS} <= names
    rows = read_rows(out / "agent_1.csv")
    assert tuple(rows[0]) == harness.METRIC_COLUMNS
    assert len(rows) == 40 * 5
    assert all(float(r["nees"]) >= 0 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["steps"] == 40
    assert set(summary["variants"]) == set(harness.config_mod.VARIANTS)


def test_zero_duration(small, tmp_path):
    assert harness.run(small, 1, tmp_path / "z", ["world.duration=0"]) == 0
    assert read_rows(tmp_path / "z" / "agent_1.csv") == []
    summary = json.loads((tmp_path / "z" / "summary.json").read_text())
    assert summary["variants"]["aucl"]["final_rmse"] is None


def test_same_seed_is_byte_identical(small, tmp_path):
    harness.run(small, 7, tmp_path / "a")
    harness.run(small, 7, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_dead_reckoning_replay(small, tmp_path):
    """Integrate the logged odometry independently and compare errors."""
    out = tmp_path / "r"
    harness.run(small, 5, out, ['variants=["dr_only"]'])
    dt = SMALL["world"]["dt"]
    init = {int(r["agent"]): r for r in read_rows(out / "initial.csv")}
    odo = read_rows(out / "odometry.csv")
    for agent, r in init.items():
        x, y, th = float(r["est_x"]), float(r["est_y"]), float(r["est_theta"])
        rows = [o for o in odo if int(o["agent"]) == agent]
        metrics = read_rows(out / f"agent_{agent}.csv")
        for o, m in zip(rows, metrics):
            v, om = float(o["v"]), float(o["omega"])
            x, y, th = x + v * dt * math.cos(th), y + v * dt * math.sin(th), th + om * dt
            err = math.hypot(float(m["true_x"]) - x, float(m["true_y"]) - y)
            assert float(m["pos_err"]) == pytest.approx(err, abs=1e-9)


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "schema_version": 1,\n "world": {"agents": [], "R": -1}\n}')
    assert harness.run(bad, 0, tmp_path / "o") == 1
    assert "line 3" in capsys.readouterr().err


def test_numerical_failure_exits_two(small, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("boom")
    monkeypatch.setattr(harness, "run_scenario", boom)
    assert harness.run(small, 0, tmp_path / "o") == 2


def test_messages_only_at_inter_agent_measurements(small, tmp_path):
    out = tmp_path / "m"
    harness.run(small, 2, out)
    events = read_rows(out / "measurements.csv")
    agents = {1, 2}
    by_step = {}
    for e in events:
        if int(e["target"]) in agents:
            by_step.setdefault(int(e["step"]), []).append(e)
    for variant in ("naive_uwb", "deterministic", "aucl", "aucl_compact"):
        log = read_message_log(out / f"messages_{variant}.csv")
        beliefs = [r for r in log if r.type == BELIEF]
        books = [r for r in log if r.type == BIAS_BOOK]
        assert len(beliefs) == sum(len(v) for v in by_step.values())
        assert {r.step for r in log} <= set(by_step)
        for r in log:
            assert any(int(e["observer"]) == r.receiver and int(e["target"]) == r.sender
                       for e in by_step[r.step])
        if variant in ("naive_uwb", "aucl_compact"):
            assert books == []
        else:
            assert len(books) <= len(beliefs)
    assert read_message_log(out / "messages_dr_only.csv") == []


def test_single_run_compare_has_row_per_variant(small, tmp_path):
    harness.run(small, 1, tmp_path / "a")
    cmp = harness.compare([tmp_path / "a"])
    assert list(cmp["variants"]) == list(harness.config_mod.VARIANTS)
    assert all(v["final_rmse"]["iqr"] == 0.0 for v in cmp["variants"].values())
    assert len(harness.format_table(cmp).splitlines()) == 1 + len(harness.config_mod.VARIANTS)


def test_identical_runs_give_identical_statistics(small, tmp_path):
    harness.run(small, 1, tmp_path / "a")
    harness.run(small, 1, tmp_path / "b")
    one = harness.compare([tmp_path / "a"])["variants"]
    two = harness.compare([tmp_path / "a", tmp_path / "b"])["variants"]
    for v in one:
        for metric in ("final_rmse", "loop_closure_pct"):
            assert one[v][metric]["median"] == two[v][metric]["median"]
            assert two[v][metric]["iqr"] in (0.0, None)


def test_compare_refuses_mismatched_scenarios(small, tmp_path):
    harness.run(small, 1, tmp_path / "a")
    harness.run(small, 1, tmp_path / "b", ["world.R=0.02"])
    with pytest.raises(harness.CompareError):
        harness.compare([tmp_path / "a", tmp_path / "b"])
    with pytest.raises(harness.CompareError):
        harness.compare([tmp_path / "missing"])
    with pytest.raises(harness.CompareError):
        harness.compare([])


def _recompute(dirs, variant):
    rmse, loop = [], []
    for d in dirs:
        finals, pcts = [], []
        for f in sorted(Path(d).glob("agent_*.csv")):
            rows = [r for r in read_rows(f) if r["variant"] == variant]
            last = rows[-1]
            finals.append(float(last["pos_err"]))
            init = read_rows(Path(d) / "initial.csv")
            agent = int(f.stem.split("_")[1])
            start = next(r for r in init if int(r["agent"]) == agent)
            pts = [(float(start["true_x"]), float(start["true_y"]))]
            pts += [(float(r["true_x"]), float(r["true_y"])) for r in rows]
            length = sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))
            if math.dist(pts[0], pts[-1]) <= 0.05 * length:
                pcts.append(100.0 * finals[-1] / length)
        rmse.append(math.sqrt(sum(e * e for e in finals) / len(finals)))
        if pcts:
            loop.append(sum(pcts) / len(pcts))
    return rmse, loop


def _median_iqr(values):
    q1, med, q3 = statistics.quantiles(values, n=4, method="inclusive")
    return statistics.median(values), q3 - q1


def test_sweep_statistics_match_recomputation_from_csv(small, tmp_path):
    # agent 1 walks its 24 m square once, so its loop closes
    overrides = ["world.duration=24", 'variants=["dr_only","aucl"]']
    seeds = list(range(50))
    code = harness.sweep(small, seeds, tmp_path / "sw", overrides, jobs=1)
    assert code == 0
    cmp = json.loads((tmp_path / "sw" / "compare.json").read_text())
    dirs = [tmp_path / "sw" / f"seed_{s:04d}" for s in seeds]
    for variant in ("dr_only", "aucl"):
        rmse, loop = _recompute(dirs, variant)
        med, iqr = _median_iqr(rmse)
        assert cmp["variants"][variant]["final_rmse"]["median"] == pytest.approx(med, rel=1e-12)
        assert cmp["variants"][variant]["final_rmse"]["iqr"] == pytest.approx(iqr, rel=1e-12)
        assert loop
        if loop:
            med, iqr = _median_iqr(loop)
            stats = cmp["variants"][variant]["loop_closure_pct"]
            assert stats["median"] == pytest.approx(med, rel=1e-9)
            assert stats["iqr"] == pytest.approx(iqr, rel=1e-9, abs=1e-12)


def test_seed_ranges():
    assert harness.parse_seed_range("3..6") == [3, 4, 5, 6]
    assert harness.parse_seed_range("1,5") == [1, 5]
    with pytest.raises(ValueError):
        harness.parse_seed_range("6..3")


def test_cli_round_trip(small, tmp_path, capsys):
    assert cli.main(["run", "--config", str(small), "--seed", "2", "--out",
                     str(tmp_path / "a"), "--set", 'variants=["dr_only","aucl"]']) == 0
    assert cli.main(["compare", str(tmp_path / "a")]) == 0
    assert "aucl" in capsys.readouterr().out
    assert cli.main(["compare", "--json", str(tmp_path / "a")]) == 0
    assert json.loads(capsys.readouterr().out)["runs"] == 1
    assert cli.main(["compare", str(tmp_path / "nothing")]) == 1
    assert cli.main(["sweep", "--config", str(small), "--seeds", "0..1", "--out",
                     str(tmp_path / "s"), "--jobs", "2", "--set", 'variants=["dr_only"]']) == 0
    assert (tmp_path / "s" / "compare.json").exists()
    assert cli.main(["sweep", "--config", str(small), "--seeds", "x", "--out",
                     str(tmp_path / "t")]) == 1


def test_parallel_and_serial_sweeps_agree(small, tmp_path):
    ov = ['variants=["aucl"]']
    harness.sweep(small, [0, 1], tmp_path / "p", ov, jobs=2)
    harness.sweep(small, [0, 1], tmp_path / "s", ov, jobs=1)
    for s in (0, 1):
        a = (tmp_path / "p" / f"seed_{s:04d}" / "agent_1.csv").read_bytes()
        b = (tmp_path / "s" / f"seed_{s:04d}" / "agent_1.csv").read_bytes()
        assert a == b
