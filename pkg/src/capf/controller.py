"""Two-stage receding-horizon controller.

Each control step alternates between (1) picking the strongest overlap
certificate per stage, by minimizing K over lambda at candidate states
taken from the shifted previous prediction, and (2) solving the
parameterized horizon problem with those lambdas frozen.  The loop stops
on a lambda-change threshold, an iteration budget, or the wall-clock
budget, and the first input of the last completed solve is applied.

Alternative modes: a fixed lambda-hat held over the horizon and over
time (conservative but simple), and the joint formulation with lambda as
decision variables (comparison only).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NX, VehicleParams
from .geometry import _PairBasis, k_fused_many, minimize_k_batch
from .ocp import ObstacleTrack, OcpConfig, OcpSolver, SolveOutput, SolveStatus
from .paths import Path


@dataclass(frozen=True)
class ControlMode:
    kind: str  # "twostage" | "fixed" | "joint"
    lambda_hat: float | None = None

    def __post_init__(self):
        if self.kind not in ("twostage", "fixed", "joint"):
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.kind == "fixed":
            if self.lambda_hat is None or not 0.0 <= self.lambda_hat <= 1.0:
                raise ValueError("fixed mode needs lambda_hat in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "ControlMode":
        if text == "twostage":
            return cls("twostage")
        if text == "joint":
            return cls("joint")
        if text.startswith("fixed:"):
            return cls("fixed", float(text.split(":", 1)[1]))
        raise ValueError(f"unknown mode {text!r} (use twostage, joint, or fixed:<value>)")

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.lambda_hat:g}"
        return self.kind


TWO_STAGE = ControlMode("twostage")
JOINT = ControlMode("joint")


@dataclass
class StepDiagnostics:
    t: float
    iterations: int
    lambda_bar: np.ndarray      # (L, N+1)
    k0: np.ndarray              # (L,) certificate at the measured state
    cost: float
    wall_time: float
    slack_max: float
    status: SolveStatus
    mode: str
    degraded: bool = False
    pred_k_max: float = -np.inf
    kkt_residual: float = np.nan

    def to_json_line(self) -> str:
        return json.dumps({
            "t": round(self.t, 9),
            "lambda0": [float(v) for v in self.lambda_bar[:, 0]] if self.lambda_bar.size else [],
            "K0": [float(v) for v in self.k0],
            "J": float(self.cost),
            "iters": self.iterations,
            "wall_time": float(self.wall_time),
            "slack_max": float(self.slack_max),
            "mode": self.mode,
        })


class Controller:
    """Owns the solver instance, warm starts, and the lambda schedule.

    Exclusively owned by one control loop; not safe for concurrent use.
    """

    def __init__(self, cfg: OcpConfig, path: Path, vehicle: VehicleParams,
                 robot_shape, obstacles: list[ObstacleTrack],
                 mode: ControlMode = TWO_STAGE, i_max: int = 1,
                 epsilon: float = 1e-3, wall_budget: float | None = None):
        if i_max < 1:
            raise ValueError("i_max must be >= 1")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.cfg = cfg
        self.path = path
        self.vehicle = vehicle
        self.robot_shape = None if robot_shape is None else np.asarray(robot_shape, dtype=float)
        self.obstacles = list(obstacles)
        self.mode = mode
        self.i_max = i_max
        self.epsilon = epsilon
        self.wall_budget = cfg.delta if wall_budget is None else wall_budget
        self.solver = OcpSolver(cfg, path, vehicle, self.robot_shape,
                                n_obstacles=len(obstacles),
                                joint=(mode.kind == "joint"))
        self.prev_solve: SolveOutput | None = None
        self.prev_lambda: np.ndarray | None = None
        # Cache the simultaneous diagonalization per obstacle shape pair.
        self._bases = []
        for ob in self.obstacles:
            if self.robot_shape is not None and ob.base.strictly_pd:
                self._bases.append(_PairBasis(self.robot_shape, ob.base.shape))
            else:
                self._bases.append(None)

    # -- lambda schedule --------------------------------------------------
    def _minimize_lambdas(self, candidate_positions, t_now):
        """Per-stage certificate minimizers against the candidate states."""
        n1 = self.cfg.horizon + 1
        lams = np.empty((len(self.obstacles), n1))
        times = t_now + self.cfg.delta * np.arange(n1)
        for l, ob in enumerate(self.obstacles):
            centers = ob.base.center[None, :] + np.outer(times, ob.velocity)
            basis = self._bases[l]
            if basis is not None:
                lam, _ = minimize_k_batch(self.robot_shape, candidate_positions,
                                          ob.base.shape, centers, basis=basis)
            else:
                from .geometry import Ellipsoid, minimize_k
                lam = np.array([
                    minimize_k(Ellipsoid(self.robot_shape, p), Ellipsoid(ob.base.shape, c)).lambda_star
                    for p, c in zip(candidate_positions, centers)])
            lams[l] = lam
        return lams

    def _candidate_positions(self, x_meas):
        """Hot-start candidates: measurement now, shifted prediction after."""
        n = self.cfg.horizon
        cand = np.empty((n + 1, 3))
        cand[0] = x_meas[0:3]
        if self.prev_solve is not None:
            cand[1:n] = self.prev_solve.states[2:n + 1, 0:3]
            cand[n] = self.prev_solve.states[n, 0:3]
        else:
            cand[1:] = x_meas[0:3]
        return cand

    # -- lifecycle ---------------------------------------------------------
    def cold_start(self, x_meas, z0, t_now: float = 0.0) -> None:
        """Fabricate a hold-state warm start around the measurement."""
        n = self.cfg.horizon
        x_meas = np.asarray(x_meas, dtype=float).reshape(NX)
        z0 = np.asarray(z0, dtype=float).reshape(2)
        states = np.tile(x_meas, (n + 1, 1))
        v_traj = np.zeros(n)
        zs = np.empty((n + 1, 2))
        zs[:, 0] = z0[0] + self.cfg.delta * np.arange(n + 1) * z0[1]
        zs[:, 1] = z0[1]
        if self.obstacles:
            lambdas = self._minimize_lambdas(states[:, 0:3], t_now)
        else:
            lambdas = np.zeros((0, n + 1))
        self.prev_solve = SolveOutput(
            states=states, timing_states=zs, inputs=np.zeros((n, 4)),
            virtual_inputs=v_traj, lambda_params=lambdas, cost=np.nan,
            kkt_residual=np.inf, status=SolveStatus.MAX_ITERS, wall_time=0.0,
            slack_max=0.0)
        self.prev_lambda = lambdas
        # Prime the solver (QP working set, caches) outside the timed loop.
        primed = self.solver.solve(x_meas, z0, lambdas, self.obstacles, t_now,
                                   warm=self.prev_solve)
        if primed.status is not SolveStatus.INFEASIBLE:
            self.prev_solve = primed
            self.prev_lambda = primed.lambda_params

    def step(self, x_meas, z_now, t_now: float):
        """One control step; returns (input, virtual input, diagnostics)."""
        t_start = time.perf_counter()
        x_meas = np.asarray(x_meas, dtype=float).reshape(NX)
        z_now = np.asarray(z_now, dtype=float).reshape(2)
        if self.prev_solve is None:
            self.cold_start(x_meas, z_now, t_now)

        n1 = self.cfg.horizon + 1
        degraded = False
        if self.mode.kind == "joint":
            lam_init = self.prev_lambda if self.prev_lambda is not None and self.prev_lambda.size \
                else np.full((len(self.obstacles), n1), 0.5)
            solve = self.solver.solve(x_meas, z_now, lam_init, self.obstacles, t_now,
                                      warm=self.prev_solve, shift_warm=True)
            lam_new = solve.lambda_params
            iterations = 1
        elif self.mode.kind == "fixed":
            lam_new = np.full((len(self.obstacles), n1), self.mode.lambda_hat)
            solve = self.solver.solve(x_meas, z_now, lam_new, self.obstacles, t_now,
                                      warm=self.prev_solve, shift_warm=True)
            iterations = 1
        else:
            lam_prev = self.prev_lambda if self.prev_lambda is not None \
                else np.full((len(self.obstacles), n1), 0.5)
            cand = self._candidate_positions(x_meas)
            solve = None
            iterations = 0
            shift = True
            warm = self.prev_solve
            while iterations < self.i_max and (time.perf_counter() - t_start) < self.wall_budget:
                if self.obstacles:
                    lam_new = self._minimize_lambdas(cand, t_now)
                else:
                    lam_new = np.zeros((0, n1))
                solve = self.solver.solve(x_meas, z_now, lam_new, self.obstacles, t_now,
                                          warm=warm, shift_warm=shift)
                shift = False
                warm = solve
                cand = solve.states[:, 0:3]
                iterations += 1
                if lam_prev.size and lam_new.size and np.max(np.abs(lam_new - lam_prev)) < self.epsilon:
                    lam_prev = lam_new
                    break
                lam_prev = lam_new
            if solve is None:  # wall budget spent before any solve completed
                solve = self.prev_solve
                lam_new = self.prev_lambda
                degraded = True
            elif iterations < self.i_max and (time.perf_counter() - t_start) >= self.wall_budget \
                    and (not lam_new.size or np.max(np.abs(lam_new - lam_prev)) >= self.epsilon):
                degraded = True

        u_apply = solve.inputs[0].copy()
        nu_apply = float(solve.virtual_inputs[0])
        self.prev_solve = solve
        self.prev_lambda = lam_new

        if self.obstacles and self.robot_shape is not None:
            k0 = np.empty(len(self.obstacles))
            for l, ob in enumerate(self.obstacles):
                k_val, _ = k_fused_many(np.array([lam_new[l, 0]]), self.robot_shape,
                                        x_meas[0:3][None, :], ob.base.shape,
                                        ob.center_at(t_now)[None, :])
                k0[l] = k_val[0]
        else:
            k0 = np.zeros(0)

        diag = StepDiagnostics(
            t=t_now, iterations=iterations, lambda_bar=lam_new, k0=k0,
            cost=solve.cost, wall_time=time.perf_counter() - t_start,
            slack_max=solve.slack_max, status=solve.status,
            mode=self.mode.label(), degraded=degraded,
            pred_k_max=float(solve.collision_values.max()) if solve.collision_values.size else -np.inf,
            kkt_residual=solve.kkt_residual)
        return u_apply, nu_apply, diag
