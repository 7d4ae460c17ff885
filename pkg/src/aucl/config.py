"""Scenario configuration: JSON ingestion, validation and dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import jsonschema

from .discriminator import SigmoidParams
from .sim import AgentSpec, BeaconSpec, WorldConfig

SCHEMA_VERSION = 1
VARIANTS = ("dr_only", "naive_uwb", "deterministic", "aucl", "aucl_compact")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "aucl scenario",
    "type": "object",
    "required": ["schema_version", "world"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "uniqueItems": True,
                     "minItems": 1},
        "world": {
            "type": "object",
            "required": ["agents"],
            "additionalProperties": False,
            "properties": {
                "dt": _pos,
                "duration": _nonneg,
                "agents": {"type": "array", "minItems": 1, "items": {
                    "type": "object", "required": ["id", "waypoints"],
                    "additionalProperties": False,
                    "properties": {
                        "id": {"type": "integer"},
                        "waypoints": {"type": "array", "items": _point, "minItems": 1},
                        "speed": _nonneg}}},
                "beacons": {"type": "array", "items": {
                    "type": "object", "required": ["id", "position"],
                    "additionalProperties": False,
                    "properties": {"id": {"type": "integer"}, "position": _point}}},
                "obstacles": {"type": "array", "items": {
                    "type": "array", "items": _point, "minItems": 2, "maxItems": 2}},
                "obstacle_grid": {
                    "type": "object", "required": ["origin", "spacing", "count", "size"],
                    "additionalProperties": False,
                    "properties": {
                        "origin": _point, "spacing": _pos, "size": _pos,
                        "count": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                  "minItems": 2, "maxItems": 2}}},
                "odometry": {"type": "object", "additionalProperties": False,
                             "properties": {"sigma_v": _nonneg, "sigma_omega": _nonneg}},
                "R": _pos,
                "bias": {"type": "object", "additionalProperties": False,
                         "properties": {"phi_bar": _num, "Phi": _pos}},
                "power_metric": {"type": "object", "additionalProperties": False,
                                 "properties": {"mu_los": _num, "mu_nlos": _num,
                                                "sigma": _nonneg}},
                "sensing_range": _pos,
                "measurement_interval": {"type": "integer", "minimum": 1},
                "max_measurements_per_step": {"type": ["integer", "null"], "minimum": 0},
                "max_turn_rate": _pos,
                "initial_sigma": {"type": "object", "additionalProperties": False,
                                  "properties": {"position": _nonneg, "heading": _nonneg}},
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bias_handling": {"enum": ["second_moment", "mean_subtracted"]},
                "combine_rule": {"enum": ["paper_literal", "mixture"]},
                "likelihood_variance": {"enum": ["bound", "nominal"]},
                "threshold": _num,
                "R": _pos,
                "sigmoid": {"type": "object", "additionalProperties": False,
                            "properties": {"a": {"type": "number", "minimum": 1},
                                           "b": _pos, "c": _num}},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    R: float
    bias_handling: str = "second_moment"
    combine_rule: str = "paper_literal"
    likelihood_variance: str = "bound"
    threshold: float = 6.934
    sigmoid: SigmoidParams = SigmoidParams()


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig
    filter: FilterConfig
    variants: tuple[str, ...]
    seed: int
    raw: dict

    def digest(self) -> str:
        """Hash of the resolved scenario, ignoring the seed."""
        body = {k: v for k, v in self.raw.items() if k != "seed"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _locate(text: str, path: Iterable) -> Optional[int]:
    """Best-effort line number of the value at ``path`` inside ``text``."""
    pos, found = 0, None
    for key in path:
        if isinstance(key, int):
            continue
        k = text.find(f'"{key}"', pos)
        if k < 0:
            break
        pos, found = k, k
    return None if found is None else text.count("\n", 0, found) + 1


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(value)
    return out


def _grid_obstacles(grid: dict) -> list:
    """Plus-shaped pillars on a regular grid."""
    ox, oy = grid["origin"]
    h = grid["size"] / 2.0
    out = []
    for ix in range(grid["count"][0]):
        for iy in range(grid["count"][1]):
            cx, cy = ox + ix * grid["spacing"], oy + iy * grid["spacing"]
            out.append(((cx - h, cy), (cx + h, cy)))
            out.append(((cx, cy - h), (cx, cy + h)))
    return out


def build(raw: dict, text: Optional[str] = None) -> RunConfig:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            line = _locate(text, e.absolute_path) if text else None
            where = f"line {line}: " if line else ""
            lines.append(f"{where}{path}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))

    w = raw["world"]
    odo = w.get("odometry", {})
    bias = w.get("bias", {})
    pm = w.get("power_metric", {})
    init = w.get("initial_sigma", {})
    obstacles = [tuple(map(tuple, seg)) for seg in w.get("obstacles", [])]
    if "obstacle_grid" in w:
        obstacles += _grid_obstacles(w["obstacle_grid"])
    defaults = WorldConfig(agents=())
    try:
        world = WorldConfig(
            agents=tuple(AgentSpec(a["id"], tuple(map(tuple, a["waypoints"])),
                                   a.get("speed", 1.0)) for a in w["agents"]),
            beacons=tuple(BeaconSpec(b["id"], tuple(b["position"]))
                          for b in w.get("beacons", [])),
            obstacles=tuple(obstacles),
            dt=w.get("dt", defaults.dt),
            duration=w.get("duration", defaults.duration),
            sigma_v=odo.get("sigma_v", defaults.sigma_v),
            sigma_omega=odo.get("sigma_omega", defaults.sigma_omega),
            R=w.get("R", defaults.R),
            phi_bar=bias.get("phi_bar", defaults.phi_bar),
            Phi=bias.get("Phi", defaults.Phi),
            pm_mu_los=pm.get("mu_los", defaults.pm_mu_los),
            pm_mu_nlos=pm.get("mu_nlos", defaults.pm_mu_nlos),
            sigma_pm=pm.get("sigma", defaults.sigma_pm),
            sensing_range=w.get("sensing_range", defaults.sensing_range),
            measurement_interval=w.get("measurement_interval", defaults.measurement_interval),
            max_measurements_per_step=w.get("max_measurements_per_step"),
            max_turn_rate=w.get("max_turn_rate", defaults.max_turn_rate),
            initial_sigma_pos=init.get("position", defaults.initial_sigma_pos),
            initial_sigma_heading=init.get("heading", defaults.initial_sigma_heading),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid world: {exc}") from exc

    f = raw.get("filter", {})
    sig = f.get("sigmoid", {})
    fcfg = FilterConfig(
        R=f.get("R", world.R),
        bias_handling=f.get("bias_handling", "second_moment"),
        combine_rule=f.get("combine_rule", "paper_literal"),
        likelihood_variance=f.get("likelihood_variance", "bound"),
        threshold=f.get("threshold", 6.934),
        sigmoid=SigmoidParams(**sig),
    )
    variants = tuple(raw.get("variants", VARIANTS))
    return RunConfig(world, fcfg, variants, int(raw.get("seed", 0)), raw)


def load(path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    overrides = list(overrides)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build(raw, text)
