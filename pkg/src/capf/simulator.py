"""Closed-loop simulation harness.

Propagates the true plant at a finer substep than the control period so
plant integration is decoupled from the controller's discretization,
moves obstacles, optionally corrupts measurements, and logs the overlap
certificate, the certificate parameter, cost, and wall-time traces plus
an independent per-step intersection verdict.
"""

from __future__ import annotations

import csv
import gc
import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controller import ControlMode, Controller, TWO_STAGE
from .dynamics import NX, VehicleParams, step_rk4, step_timing
from .geometry import Ellipsoid, intersects_oracle, k_fused, minimize_k
from .ocp import ObstacleTrack, OcpConfig, SolveStatus, default_config
from .paths import Path, demo_path

PLANT_SUBSTEPS = 10


@dataclass
class Scenario:
    name: str
    path: Path
    vehicle: VehicleParams
    robot_shape: np.ndarray
    obstacles: list
    duration: float
    ocp: OcpConfig
    initial_state: np.ndarray | None = None
    noise_pos: float = 0.0
    noise_att: float = 0.0
    seed: int = 0
    mass_mismatch: float = 0.0
    i_max: int = 1
    epsilon: float = 1e-3

    def __post_init__(self):
        self.robot_shape = np.asarray(self.robot_shape, dtype=float)
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        robot = Ellipsoid(self.robot_shape, np.zeros(3))
        if not robot.strictly_pd:
            raise ValueError("robot shape matrix must be strictly positive definite")
        if self.initial_state is not None:
            self.initial_state = np.asarray(self.initial_state, dtype=float).reshape(NX)

    @property
    def delta(self) -> float:
        return self.ocp.delta

    def start_state(self) -> np.ndarray:
        if self.initial_state is not None:
            return self.initial_state.copy()
        x = np.zeros(NX)
        p0 = self.path.eval(self.path.s0)
        x[0:3] = p0[0:3]
        x[8] = p0[3]
        return x


@dataclass
class SimLog:
    scenario_name: str
    mode: str
    delta: float
    times: np.ndarray           # (steps,)
    states: np.ndarray          # (steps+1, 9) true states
    inputs: np.ndarray          # (steps, 4)
    virtual_inputs: np.ndarray  # (steps,)
    timing: np.ndarray          # (steps+1, 2)
    lambda0: np.ndarray         # (steps, L)
    k_trace: np.ndarray         # (steps, L) certificate at applied lambda, true state
    k_min_true: np.ndarray      # (steps, L) minimized certificate at true state
    oracle_overlap: np.ndarray  # (steps, L) bool
    cost: np.ndarray            # (steps,)
    wall_times: np.ndarray      # (steps,)
    slack_max: np.ndarray       # (steps,)
    pred_k_max: np.ndarray      # (steps,)
    statuses: list
    degraded: np.ndarray        # (steps,) bool
    obstacle_centers: np.ndarray  # (steps, L, 3)
    path_ref: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (steps, 4)
    aborted: bool = False
    diagnostics: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    def write_traces_csv(self, path_out):
        n_obs = self.lambda0.shape[1]
        header = (["t"] + [f"x{i}" for i in range(NX)] + ["s", "s_dot"]
                  + [f"u{i}" for i in range(4)] + ["nu"]
                  + [f"lambda0_obs{l}" for l in range(n_obs)]
                  + [f"K_obs{l}" for l in range(n_obs)]
                  + [f"k_min_obs{l}" for l in range(n_obs)]
                  + [f"overlap_obs{l}" for l in range(n_obs)]
                  + ["J", "wall_time", "slack_max", "status"])
        with open(path_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n_steps):
                row = ([self.times[i]] + list(self.states[i]) + list(self.timing[i])
                       + list(self.inputs[i]) + [self.virtual_inputs[i]]
                       + list(self.lambda0[i]) + list(self.k_trace[i])
                       + list(self.k_min_true[i]) + [int(v) for v in self.oracle_overlap[i]]
                       + [self.cost[i], self.wall_times[i], self.slack_max[i],
                          self.statuses[i].value])
                writer.writerow(row)
            final_t = self.times[-1] + self.delta if self.n_steps else 0.0
            writer.writerow([final_t] + list(self.states[-1]) + list(self.timing[-1])
                            + [""] * (4 + 1 + 4 * n_obs + 4))

    def write_diagnostics_jsonl(self, path_out):
        with open(path_out, "w") as fh:
            for diag in self.diagnostics:
                fh.write(diag.to_json_line() + "\n")

    def write_plot_bundle(self, out_dir):
        """Per-figure CSVs: trajectory vs path, certificate/lambda traces,
        wall-time distribution, and cost evolution."""
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "y", "z", "yaw", "s", "ref_x", "ref_y", "ref_z", "ref_yaw"])
            for i in range(self.n_steps):
                writer.writerow([self.times[i]] + list(self.states[i, 0:3]) + [self.states[i, 8]]
                                + [self.timing[i, 0]] + list(self.path_ref[i]))
        with open(os.path.join(out_dir, "k_lambda.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            n_obs = self.lambda0.shape[1]
            writer.writerow(["t"] + [f"K_obs{l}" for l in range(n_obs)]
                            + [f"lambda0_obs{l}" for l in range(n_obs)])
            for i in range(self.n_steps):
                writer.writerow([self.times[i]] + list(self.k_trace[i]) + list(self.lambda0[i]))
        with open(os.path.join(out_dir, "timing_ecdf.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["wall_time", "fraction"])
            w = np.sort(self.wall_times)
            for i, v in enumerate(w):
                writer.writerow([v, (i + 1) / len(w)])
        with open(os.path.join(out_dir, "cost.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "J"])
            for i in range(self.n_steps):
                writer.writerow([self.times[i], self.cost[i]])
        with open(os.path.join(out_dir, "obstacles.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            n_obs = self.obstacle_centers.shape[1]
            writer.writerow(["t"] + [f"obs{l}_{c}" for l in range(n_obs) for c in "xyz"])
            for i in range(self.n_steps):
                writer.writerow([self.times[i]] + list(self.obstacle_centers[i].reshape(-1)))


def run(scenario: Scenario, mode: ControlMode = TWO_STAGE,
        oracle_every: int = 1) -> SimLog:
    """Run the closed loop and log everything.

    Aborts (with the log flagged) if the solver reports Infeasible for 10
    consecutive steps.  The intersection oracle runs every
    ``oracle_every`` steps (it is test instrumentation, not control).
    """
    cfg = scenario.ocp
    delta = cfg.delta
    steps = int(round(scenario.duration / delta))
    rng = np.random.default_rng(scenario.seed)
    oracle_rng = np.random.default_rng(scenario.seed + 1)

    plant_params = scenario.vehicle
    if scenario.mass_mismatch:
        plant_params = VehicleParams(
            mass=scenario.vehicle.mass * (1.0 + scenario.mass_mismatch),
            gravity=scenario.vehicle.gravity,
            roll_lag=scenario.vehicle.roll_lag,
            pitch_lag=scenario.vehicle.pitch_lag)

    controller = Controller(cfg, scenario.path, scenario.vehicle, scenario.robot_shape,
                            scenario.obstacles, mode=mode, i_max=scenario.i_max,
                            epsilon=scenario.epsilon)
    n_obs = len(scenario.obstacles)
    robot = scenario.robot_shape

    x_true = scenario.start_state()
    z = np.array([scenario.path.s0, cfg.s_dot_floor])
    controller.cold_start(_measure(x_true, None, rng, scenario), z, 0.0)

    log = SimLog(
        scenario_name=scenario.name, mode=mode.label(), delta=delta,
        times=np.empty(steps), states=np.empty((steps + 1, NX)),
        inputs=np.empty((steps, 4)), virtual_inputs=np.empty(steps),
        timing=np.empty((steps + 1, 2)), lambda0=np.empty((steps, n_obs)),
        k_trace=np.empty((steps, n_obs)), k_min_true=np.empty((steps, n_obs)),
        oracle_overlap=np.zeros((steps, n_obs), dtype=bool), cost=np.empty(steps),
        wall_times=np.empty(steps), slack_max=np.empty(steps),
        pred_k_max=np.empty(steps), statuses=[], degraded=np.zeros(steps, dtype=bool),
        obstacle_centers=np.empty((steps, n_obs, 3)),
        path_ref=np.empty((steps, 4)))

    pos_history: deque = deque(maxlen=5)
    infeasible_streak = 0
    sub = delta / PLANT_SUBSTEPS

    # Keep collector pauses out of the timed controller step; collect
    # explicitly between steps instead.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(steps):
            t = i * delta
            if i % 25 == 0:
                gc.collect()
            meas = _measure(x_true, pos_history, rng, scenario)
            u, nu, diag = controller.step(meas, z, t)

            log.times[i] = t
            log.states[i] = x_true
            log.timing[i] = z
            log.inputs[i] = u
            log.virtual_inputs[i] = nu
            log.cost[i] = diag.cost
            log.wall_times[i] = diag.wall_time
            log.slack_max[i] = diag.slack_max
            log.pred_k_max[i] = diag.pred_k_max
            log.statuses.append(diag.status)
            log.degraded[i] = diag.degraded
            log.diagnostics.append(diag)
            log.path_ref[i] = scenario.path.eval(z[0])

            for l, ob in enumerate(scenario.obstacles):
                center = ob.center_at(t)
                log.obstacle_centers[i, l] = center
                robot_e = Ellipsoid(robot, x_true[0:3])
                obs_e = Ellipsoid(ob.base.shape, center)
                lam0 = diag.lambda_bar[l, 0] if diag.lambda_bar.size else 0.5
                log.lambda0[i, l] = lam0
                lam_eval = float(np.clip(lam0, 0.0 if ob.base.strictly_pd else 1e-4, 1.0))
                log.k_trace[i, l] = k_fused(lam_eval, robot_e, obs_e).k_value
                verdict = minimize_k(robot_e, obs_e)
                log.k_min_true[i, l] = verdict.k_min
                if ob.base.strictly_pd and (i % oracle_every == 0):
                    log.oracle_overlap[i, l] = intersects_oracle(robot_e, obs_e, rng=oracle_rng)
                else:
                    log.oracle_overlap[i, l] = verdict.k_min > 0.0

            infeasible_streak = (infeasible_streak + 1
                                 if diag.status is SolveStatus.INFEASIBLE else 0)
            if infeasible_streak >= 10:
                log.aborted = True
                log.times = log.times[:i + 1]
                log.states = log.states[:i + 2]
                break

            for _ in range(PLANT_SUBSTEPS):
                x_true = step_rk4(x_true, u, plant_params, sub)
            z = step_timing(z, nu, delta)
    finally:
        if gc_was_enabled:
            gc.enable()

    if not log.aborted:
        log.states[steps] = x_true
        log.timing[steps] = z
    return log


def _measure(x_true, pos_history, rng, scenario: Scenario):
    """Measurement model: optional position/attitude noise with the
    translational velocity re-estimated by a moving-average finite
    difference over the noisy positions (window 5)."""
    if scenario.noise_pos <= 0.0 and scenario.noise_att <= 0.0:
        if pos_history is not None:
            pos_history.append(x_true[0:3].copy())
        return x_true.copy()
    meas = x_true.copy()
    meas[0:3] += rng.normal(0.0, scenario.noise_pos, 3) if scenario.noise_pos > 0 else 0.0
    meas[6:9] += rng.normal(0.0, scenario.noise_att, 3) if scenario.noise_att > 0 else 0.0
    if pos_history is not None:
        pos_history.append(meas[0:3].copy())
        if scenario.noise_pos > 0.0:
            if len(pos_history) >= 2:
                span = (len(pos_history) - 1) * scenario.ocp.delta
                meas[3:6] = (pos_history[-1] - pos_history[0]) / span
            else:
                meas[3:6] = 0.0
    return meas


def metrics(log: SimLog, path: Path | None = None) -> dict:
    """Summary metrics: wall-time quantiles, certificate and lambda ranges,
    path deviation, and terminal progress."""
    w = log.wall_times
    out = {
        "steps": int(log.n_steps),
        "aborted": bool(log.aborted),
        "wall_p50": float(np.percentile(w, 50)),
        "wall_p75": float(np.percentile(w, 75)),
        "wall_p95": float(np.percentile(w, 95)),
        "wall_max": float(np.max(w)),
        "terminal_s": float(log.timing[-1, 0]),
        "collision_free": bool(not log.oracle_overlap.any()),
        "overlap_steps": int(log.oracle_overlap.any(axis=1).sum()),
        "max_slack": float(np.max(log.slack_max)) if log.n_steps else 0.0,
        "max_pred_k": float(np.max(log.pred_k_max)) if log.n_steps else float("-inf"),
    }
    if log.k_trace.size:
        out["k_trace_min"] = float(np.min(log.k_trace))
        out["k_trace_max"] = float(np.max(log.k_trace))
        out["k_min_true_min"] = float(np.min(log.k_min_true))
        out["k_min_true_max"] = float(np.max(log.k_min_true))
        contact = np.abs(log.k_min_true).min(axis=1) <= 1e-3
        out["contact_steps"] = int(contact.sum())
        out["contact_longest_run"] = int(_longest_run(contact))
    if log.lambda0.size:
        out["lambda0_min"] = float(np.min(log.lambda0))
        out["lambda0_max"] = float(np.max(log.lambda0))
        out["lambda0_std"] = float(np.std(log.lambda0[:, 0]))
    # Tracking deviation against the commanded reference point.
    n = min(log.n_steps, log.path_ref.shape[0])
    dev = np.linalg.norm(log.states[:n, 0:3] - log.path_ref[:n, 0:3], axis=1)
    out["max_tracking_error"] = float(np.max(dev)) if dev.size else 0.0
    # Geometric distance to the path as a curve.
    if path is not None and log.n_steps:
        grid = np.linspace(path.s0, 0.0, 2001)
        curve = path.eval_many(grid)[:, 0:3]
        d = np.min(np.linalg.norm(log.states[:log.n_steps, 0:3][:, None, :] - curve[None, :, :], axis=2), axis=1)
        out["max_path_distance"] = float(np.max(d))
        out["mean_path_distance"] = float(np.mean(d))
    return out


def _longest_run(mask) -> int:
    best = cur = 0
    for v in mask:
        cur = cur + 1 if v else 0
        best = max(best, cur)
    return best


def run_batch(jobs, workers: int = 2):
    """Run (scenario, mode) pairs concurrently, one controller each."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, sc, mode) for sc, mode in jobs]
        return [f.result() for f in futures]
