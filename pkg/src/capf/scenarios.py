"""Scenario definitions: built-in demos and JSON (de)serialization.

The built-in scenarios embed the demonstration path, the drone and
obstacle shape matrices, the obstacle center and drift velocity, and the
horizon/discretization (N = 20, 20 ms) used throughout.
"""

from __future__ import annotations

import json

import jsonschema
import numpy as np

from .dynamics import VehicleParams
from .geometry import Ellipsoid
from .ocp import ObstacleTrack, OcpConfig, default_config
from .paths import Path, demo_path, from_waypoints
from .simulator import Scenario

DRONE_SHAPE = np.array([
    [177.78, 0.0, 0.0],
    [0.0, 177.78, 0.0],
    [0.0, 0.0, 1975.3],
])

OBSTACLE_SHAPE = np.array([
    [234.57, -67.42, 0.0],
    [-67.42, 190.76, 0.0],
    [0.0, 0.0, 35.44],
])

OBSTACLE_CENTER = np.array([0.2, 0.16, 0.5])
OBSTACLE_DRIFT = np.array([0.0, 0.005, 0.0])

BUILTIN_NAMES = ("demo-static", "demo-moving")

_MATRIX3 = {
    "type": "array", "minItems": 3, "maxItems": 3,
    "items": {"type": "array", "minItems": 3, "maxItems": 3,
              "items": {"type": "number"}},
}
_VEC3 = {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number"}}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["path", "drone_shape", "obstacles", "duration"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "path": {
            "oneOf": [
                {"type": "string", "enum": ["demo"]},
                {
                    "type": "object",
                    "required": ["s_samples", "points"],
                    "additionalProperties": False,
                    "properties": {
                        "s_samples": {"type": "array", "minItems": 2,
                                      "items": {"type": "number"}},
                        "points": {"type": "array", "minItems": 2,
                                   "items": {"type": "array", "minItems": 4, "maxItems": 4,
                                             "items": {"type": "number"}}},
                    },
                },
            ]
        },
        "vehicle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mass": {"type": "number", "exclusiveMinimum": 0},
                "gravity": {"type": "number", "exclusiveMinimum": 0},
                "roll_lag": {"type": "number", "exclusiveMinimum": 0},
                "pitch_lag": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "drone_shape": _MATRIX3,
        "obstacles": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["shape", "center"],
                "additionalProperties": False,
                "properties": {
                    "shape": _MATRIX3,
                    "center": _VEC3,
                    "velocity": _VEC3,
                },
            },
        },
        "initial_state": {"type": "array", "minItems": 9, "maxItems": 9,
                          "items": {"type": "number"}},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "position": {"type": "number", "minimum": 0},
                "attitude": {"type": "number", "minimum": 0},
            },
        },
        "seed": {"type": "integer"},
        "mass_mismatch": {"type": "number"},
        "i_max": {"type": "integer", "minimum": 1},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "ocp": {"type": "object"},
    },
}


class ScenarioError(ValueError):
    """Scenario file rejected; message carries a JSON-pointer-style path."""


def builtin_scenario(name: str, **overrides) -> Scenario:
    if name not in BUILTIN_NAMES:
        raise ScenarioError(f"unknown builtin scenario {name!r}; choices: {BUILTIN_NAMES}")
    vehicle = VehicleParams()
    # Demo tuning: the progress weight must overcome the short horizon's
    # myopia or the traverse crawls; alpha > 0 keeps the boundary ride
    # strictly separated so the closed-set intersection oracle stays quiet.
    # Two SQP iterations per step (real-time iteration style) keep the
    # worst step comfortably inside the 20 ms period on a single core;
    # the safety metrics match deeper iteration caps on this scenario.
    cfg = default_config(
        vehicle,
        W_s=np.array([[25.0]]),
        collision_margin=5e-4,
        sqp_max_iters=2,
    )
    drift = OBSTACLE_DRIFT if name == "demo-moving" else np.zeros(3)
    scenario = Scenario(
        name=name,
        path=demo_path(),
        vehicle=vehicle,
        robot_shape=DRONE_SHAPE.copy(),
        obstacles=[ObstacleTrack(Ellipsoid(OBSTACLE_SHAPE, OBSTACLE_CENTER), drift)],
        duration=12.0,
        ocp=cfg,
    )
    return _apply_overrides(scenario, overrides)


def _apply_overrides(scenario: Scenario, overrides: dict) -> Scenario:
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "alpha":
            scenario.ocp.collision_margin = float(value)
        elif key == "duration":
            scenario.duration = float(value)
        elif key == "seed":
            scenario.seed = int(value)
        elif key == "i_max":
            scenario.i_max = int(value)
        elif key == "epsilon":
            scenario.epsilon = float(value)
        else:
            raise ScenarioError(f"unknown override {key!r}")
    scenario.ocp.validate()
    return scenario


def scenario_from_dict(data: dict) -> Scenario:
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as err:
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ScenarioError(f"at {pointer or '/'}: {err.message}") from err

    if data["path"] == "demo":
        path = demo_path()
    else:
        spec = data["path"]
        try:
            path = from_waypoints(spec["s_samples"], spec["points"])
        except ValueError as err:
            raise ScenarioError(f"at /path: {err}") from err

    vehicle = VehicleParams(**data.get("vehicle", {}))
    try:
        cfg_fields = data.get("ocp", {})
        cfg = default_config(vehicle)
        if cfg_fields:
            base = cfg.to_dict()
            unknown = set(cfg_fields) - set(base)
            if unknown:
                raise ScenarioError(f"at /ocp: unknown fields {sorted(unknown)}")
            base.update(cfg_fields)
            cfg = OcpConfig.from_dict(base)
    except (ValueError, TypeError) as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(f"at /ocp: {err}") from err

    obstacles = []
    for idx, ob in enumerate(data["obstacles"]):
        try:
            obstacles.append(ObstacleTrack.from_dict(ob))
        except ValueError as err:
            raise ScenarioError(f"at /obstacles/{idx}: {err}") from err

    noise = data.get("noise", {})
    try:
        return Scenario(
            name=data.get("name", "scenario"),
            path=path,
            vehicle=vehicle,
            robot_shape=np.array(data["drone_shape"], dtype=float),
            obstacles=obstacles,
            duration=float(data["duration"]),
            ocp=cfg,
            initial_state=np.array(data["initial_state"], dtype=float) if "initial_state" in data else None,
            noise_pos=float(noise.get("position", 0.0)),
            noise_att=float(noise.get("attitude", 0.0)),
            seed=int(data.get("seed", 0)),
            mass_mismatch=float(data.get("mass_mismatch", 0.0)),
            i_max=int(data.get("i_max", 1)),
            epsilon=float(data.get("epsilon", 1e-3)),
        )
    except ValueError as err:
        raise ScenarioError(str(err)) from err


def scenario_to_dict(scenario: Scenario) -> dict:
    # Waypoint paths round-trip through dense resampling of the evaluator;
    # the builtin demo path serializes by name.
    if getattr(scenario.path.evaluator, "__name__", "") == "_demo_evaluator":
        path_repr = "demo"
    else:
        grid = np.linspace(scenario.path.s0, 0.0, 101)
        path_repr = {"s_samples": grid.tolist(),
                     "points": scenario.path.eval_many(grid).tolist()}
    out = {
        "name": scenario.name,
        "path": path_repr,
        "vehicle": scenario.vehicle.to_dict(),
        "drone_shape": scenario.robot_shape.tolist(),
        "obstacles": [ob.to_dict() for ob in scenario.obstacles],
        "duration": scenario.duration,
        "seed": scenario.seed,
        "mass_mismatch": scenario.mass_mismatch,
        "i_max": scenario.i_max,
        "epsilon": scenario.epsilon,
        "ocp": scenario.ocp.to_dict(),
    }
    if scenario.initial_state is not None:
        out["initial_state"] = scenario.initial_state.tolist()
    if scenario.noise_pos or scenario.noise_att:
        out["noise"] = {"position": scenario.noise_pos, "attitude": scenario.noise_att}
    return out


def load_scenario(source: str, **overrides) -> Scenario:
    """Scenario from a builtin name or a JSON file path."""
    if source in BUILTIN_NAMES:
        return builtin_scenario(source, **overrides)
    try:
        with open(source) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {source}")
    except json.JSONDecodeError as err:
        raise ScenarioError(f"invalid JSON in {source}: {err}")
    scenario = scenario_from_dict(data)
    return _apply_overrides(scenario, overrides)
