"""Collision-avoidant path-following OCP and its Gauss-Newton SQP solver.

The horizon problem minimizes the weighted tracking cost of the stacked
stage residual [y - p(s); s; u; nu] subject to the vehicle and timing-law
dynamics, input and timing bounds, and one overlap-certificate row
K(lambda_k, x_k) <= -margin per obstacle and stage, softened through
L1/L2-penalized slacks.  States are eliminated by shooting, so each SQP
iteration condenses into a dense strictly convex QP in the input moves,
virtual-input moves, and slacks, solved by the warm-started active-set
method in ``capf.qp``.

Two variants share the machinery: the parameterized problem treats the
certificate parameters lambda as fixed data (the reliable path), while
the joint problem makes them decision variables with a regularized
zero-cost block (comparison mode; ill-conditioned by construction).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.optimize

from .dynamics import (NU, NX, VehicleParams, discrete_jacobians_batch,
                       rollout_rk4, timing_matrices)
from .geometry import Ellipsoid, k_fused_many
from .paths import Path
from .qp import QpStatus, solve_qp

_OUTPUT_IDX = [0, 1, 2, 8]  # position rows and yaw


def _default_u_bound():
    p = VehicleParams()
    return np.array([0.5 * p.mass * p.gravity, 0.35, 0.35, 1.0])


@dataclass
class OcpConfig:
    horizon: int = 20
    delta: float = 0.02
    W_y: np.ndarray = field(default_factory=lambda: np.diag([50.0, 50.0, 50.0, 5.0]))
    W_s: np.ndarray = field(default_factory=lambda: np.array([[1.0]]))
    W_u: np.ndarray = field(default_factory=lambda: np.diag([1.0, 10.0, 10.0, 1.0]))
    W_nu: np.ndarray = field(default_factory=lambda: np.array([[0.1]]))
    u_min: np.ndarray = field(default_factory=lambda: -_default_u_bound())
    u_max: np.ndarray = field(default_factory=_default_u_bound)
    nu_min: float = -2.0
    nu_max: float = 2.0
    s_dot_max: float = 0.3
    state_bounds: tuple | None = None  # (lower (9,), upper (9,)) with +/-inf entries
    soft_penalty_l1: float = 1e3
    soft_penalty_l2: float = 1e4
    collision_margin: float = 0.0
    sqp_max_iters: int = 30
    kkt_tol: float = 1e-6
    # Numerical knobs; defaults are not scenario-tuned.
    s_dot_floor: float = 1e-6
    s_cap_headroom: float = 1e-3
    lambda_reg: float = 1e-4
    collision_feas_tol: float = 1e-7
    armijo: float = 1e-4
    max_backtracks: int = 6

    def __post_init__(self):
        self.W_y = np.asarray(self.W_y, dtype=float)
        self.W_s = np.atleast_2d(np.asarray(self.W_s, dtype=float))
        self.W_u = np.asarray(self.W_u, dtype=float)
        self.W_nu = np.atleast_2d(np.asarray(self.W_nu, dtype=float))
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        self.validate()

    def validate(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        for name, mat, dim in (("W_y", self.W_y, 4), ("W_s", self.W_s, 1),
                               ("W_u", self.W_u, 4), ("W_nu", self.W_nu, 1)):
            if mat.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim}")
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat)[0] <= 0.0:
                raise ValueError(f"{name} must be positive definite")
        if not (self.nu_min < 0.0 < self.nu_max):
            raise ValueError("virtual input bounds must straddle zero")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be elementwise below u_max")
        if self.s_dot_max <= 0.0:
            raise ValueError("s_dot_max must be positive")
        if self.soft_penalty_l1 < 0.0 or self.soft_penalty_l2 < 0.0:
            raise ValueError("soft penalties must be nonnegative")
        if self.collision_margin < 0.0:
            raise ValueError("collision_margin must be nonnegative")
        if self.sqp_max_iters < 1:
            raise ValueError("sqp_max_iters must be >= 1")

    def weight_matrix(self) -> np.ndarray:
        w = np.zeros((10, 10))
        w[0:4, 0:4] = self.W_y
        w[4, 4] = self.W_s[0, 0]
        w[5:9, 5:9] = self.W_u
        w[9, 9] = self.W_nu[0, 0]
        return w

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "delta": self.delta,
            "W_y": self.W_y.tolist(),
            "W_s": self.W_s.tolist(),
            "W_u": self.W_u.tolist(),
            "W_nu": self.W_nu.tolist(),
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "nu_min": self.nu_min,
            "nu_max": self.nu_max,
            "s_dot_max": self.s_dot_max,
            "state_bounds": None if self.state_bounds is None else
                [np.asarray(self.state_bounds[0], dtype=float).tolist(),
                 np.asarray(self.state_bounds[1], dtype=float).tolist()],
            "soft_penalty_l1": self.soft_penalty_l1,
            "soft_penalty_l2": self.soft_penalty_l2,
            "collision_margin": self.collision_margin,
            "sqp_max_iters": self.sqp_max_iters,
            "kkt_tol": self.kkt_tol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OcpConfig":
        data = dict(data)
        if data.get("state_bounds") is not None:
            lo, hi = data["state_bounds"]
            data["state_bounds"] = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        return cls(**data)


def default_config(vehicle: VehicleParams | None = None, **overrides) -> OcpConfig:
    """Config with thrust bounds scaled to the vehicle's hover thrust."""
    vehicle = vehicle or VehicleParams()
    bound = np.array([0.5 * vehicle.mass * vehicle.gravity, 0.35, 0.35, 1.0])
    cfg = OcpConfig(u_min=-bound, u_max=bound)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class ObstacleTrack:
    base: Ellipsoid
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        vel = np.asarray(self.velocity, dtype=float).reshape(3).copy()
        vel.setflags(write=False)
        object.__setattr__(self, "velocity", vel)

    def center_at(self, t: float) -> np.ndarray:
        return self.base.center + self.velocity * t

    def at(self, t: float) -> Ellipsoid:
        return Ellipsoid(self.base.shape, self.center_at(t))

    def to_dict(self) -> dict:
        out = self.base.to_dict()
        out["velocity"] = self.velocity.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ObstacleTrack":
        return cls(Ellipsoid(np.array(data["shape"], dtype=float),
                             np.array(data["center"], dtype=float)),
                   np.asarray(data.get("velocity", [0.0, 0.0, 0.0]), dtype=float))


class SolveStatus(Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


@dataclass
class SolveOutput:
    states: np.ndarray          # (N+1, 9)
    timing_states: np.ndarray   # (N+1, 2)
    inputs: np.ndarray          # (N, 4)
    virtual_inputs: np.ndarray  # (N,)
    lambda_params: np.ndarray   # (L, N+1)
    cost: float
    kkt_residual: float
    status: SolveStatus
    wall_time: float
    slack_max: float
    collision_values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    merit_history: list = field(default_factory=list)
    sqp_iterations: int = 0

    def summary_dict(self) -> dict:
        return {
            "cost": float(self.cost),
            "kkt_residual": float(self.kkt_residual),
            "status": self.status.value,
            "wall_time": float(self.wall_time),
            "slack_max": float(self.slack_max),
        }

    def to_csv(self, path_out):
        n = self.states.shape[0] - 1
        n_obs = self.lambda_params.shape[0]
        header = (["k"] + [f"x{i}" for i in range(NX)] + ["s", "s_dot"]
                  + [f"u{i}" for i in range(NU)] + ["nu"]
                  + [f"lambda_obs{l}" for l in range(n_obs)]
                  + [f"K_obs{l}" for l in range(n_obs)])
        with open(path_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(n + 1):
                row = [k] + list(self.states[k]) + list(self.timing_states[k])
                if k < n:
                    row += list(self.inputs[k]) + [self.virtual_inputs[k]]
                else:
                    row += [""] * (NU + 1)
                row += [self.lambda_params[l, k] for l in range(n_obs)]
                for l in range(n_obs):
                    row.append(self.collision_values[l, k] if self.collision_values.size else "")
                writer.writerow(row)


def stage_cost(y, z, u, nu, path: Path, cfg: OcpConfig) -> float:
    """Weighted squared norm of the stacked stage residual."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    s = float(z[0])
    r = np.concatenate([y - path.eval(s), [s], u, [nu]])
    return float(r @ cfg.weight_matrix() @ r)


class _ObstacleData:
    """Per-solve obstacle view: shape, predicted centers, lambda floor."""

    def __init__(self, track: ObstacleTrack, times: np.ndarray):
        self.shape = track.base.shape
        self.centers = track.base.center[None, :] + np.outer(times, track.velocity)
        self.lam_floor = 0.0 if track.base.strictly_pd else 1e-4


class OcpSolver:
    """Warm-startable SQP solver bound to one configuration and robot shape.

    An instance carries the QP working set between solves, so it is
    single-threaded by design; create one instance per control loop.
    """

    def __init__(self, cfg: OcpConfig, path: Path, vehicle: VehicleParams,
                 robot_shape: np.ndarray | None = None, n_obstacles: int = 0,
                 joint: bool = False):
        cfg.validate()
        if n_obstacles > 0 and robot_shape is None:
            raise ValueError("robot_shape is required when obstacles are present")
        self.cfg = cfg
        self.path = path
        self.vehicle = vehicle
        self.robot_shape = None if robot_shape is None else np.asarray(robot_shape, dtype=float)
        self.n_obstacles = n_obstacles
        self.joint = joint

        n = cfg.horizon
        self.n_u = NU * n
        self.n_v = n
        self.n_uv = self.n_u + self.n_v
        # Stage 0 has no state sensitivity, so its collision row only pins
        # its slack to a constant; keep it out of the parameterized QP.  The
        # joint variant keeps stage 0 because lambda_0 is a decision there.
        self.coll_stages = list(range(0, n + 1)) if joint else list(range(1, n + 1))
        per_obs = len(self.coll_stages)
        self.n_lam = n_obstacles * (n + 1) if joint else 0
        self.n_sig = n_obstacles * per_obs
        self.n_var = self.n_uv + self.n_lam + self.n_sig
        self.off_v = self.n_u
        self.off_lam = self.n_uv
        self.off_sig = self.n_uv + self.n_lam

        # Exact condensing of the linear timing law: dz_k = Tz[k] @ dV.
        delta = cfg.delta
        self.tz_s = np.zeros((n + 1, n))
        self.tz_sd = np.zeros((n + 1, n))
        for k in range(1, n + 1):
            j = np.arange(k)
            self.tz_s[k, :k] = delta**2 * (k - j - 0.5)
            self.tz_sd[k, :k] = delta
        self.timing_a, self.timing_b = timing_matrices(delta)

        self.w_chol = np.linalg.cholesky(cfg.weight_matrix()).T  # r'Wr = |w_chol @ r|^2

        # Per-variable scaling: bound half-ranges for inputs, so the QP sees
        # commensurate coordinates (thrust newtons vs radians differ by 10x).
        scale = np.ones(self.n_var)
        u_scale = 0.5 * (cfg.u_max - cfg.u_min)
        scale[:self.n_u] = np.tile(u_scale, n)
        scale[self.off_v:self.off_v + self.n_v] = 0.5 * (cfg.nu_max - cfg.nu_min)
        self.var_scale = scale

        self._build_constant_rows()
        self.g_mat *= self.var_scale[None, :]
        self._working_set: tuple = ()

        # Reused per-iteration buffers; every nonzero entry is rewritten
        # each time, so stale values cannot leak.  The sensitivities are
        # built directly in the scaled coordinates: b_list columns carry the
        # input half-ranges, the timing blocks carry the nu half-range, and
        # the constant identity blocks are written scaled once here.
        self._sx_buf = np.zeros((n + 1, NX, self.n_u))
        self._jac_buf = np.zeros((n, 10, self.n_uv))
        self._u_scale4 = 0.5 * (cfg.u_max - cfg.u_min)
        self._v_scale1 = 0.5 * (cfg.nu_max - cfg.nu_min)
        self._tz_s_sc = self.tz_s * self._v_scale1
        self._tz_sd_sc = self.tz_sd * self._v_scale1
        for k in range(n):
            self._jac_buf[k, 5:9, NU * k:NU * k + NU] = np.diag(self._u_scale4)
            self._jac_buf[k, 9, self.n_u + k] = self._v_scale1
        self._q_buf = np.zeros((self.n_var, self.n_var))
        self._h_buf = np.empty(self.m_rows)
        self._steps_col = np.arange(n + 1)[:, None]

    # -- constraint rows: layout is fixed, collision/state blocks are
    #    rewritten in place every SQP iteration -------------------------
    def _build_constant_rows(self):
        cfg = self.cfg
        n = cfg.horizon
        n_var = self.n_var
        self._state_idx = []
        if cfg.state_bounds is not None:
            lo, hi = cfg.state_bounds
            self._state_lo = np.asarray(lo, dtype=float)
            self._state_hi = np.asarray(hi, dtype=float)
            self._state_idx = [i for i in range(NX)
                               if np.isfinite(self._state_lo[i]) or np.isfinite(self._state_hi[i])]
        n_state_rows = 2 * len(self._state_idx) * n
        n_coll = self.n_sig
        n_sig_rows = self.n_sig
        n_lam_rows = 2 * self.n_lam if self.joint else 0

        m = 2 * self.n_u + 2 * self.n_v + 4 * n + n_state_rows + 1 + n_coll + n_sig_rows + n_lam_rows
        g = np.zeros((m, n_var))
        base = 0

        self._sl_u = slice(base, base + 2 * self.n_u)
        g[base:base + self.n_u, :self.n_u] = np.eye(self.n_u)
        g[base + self.n_u:base + 2 * self.n_u, :self.n_u] = -np.eye(self.n_u)
        base += 2 * self.n_u

        self._sl_v = slice(base, base + 2 * self.n_v)
        g[base:base + self.n_v, self.off_v:self.off_v + self.n_v] = np.eye(self.n_v)
        g[base + self.n_v:base + 2 * self.n_v, self.off_v:self.off_v + self.n_v] = -np.eye(self.n_v)
        base += 2 * self.n_v

        self._sl_z = slice(base, base + 4 * n)
        g[base:base + n, self.off_v:self.off_v + n] = self.tz_s[1:]
        g[base + n:base + 2 * n, self.off_v:self.off_v + n] = -self.tz_s[1:]
        g[base + 2 * n:base + 3 * n, self.off_v:self.off_v + n] = self.tz_sd[1:]
        g[base + 3 * n:base + 4 * n, self.off_v:self.off_v + n] = -self.tz_sd[1:]
        base += 4 * n

        self._sl_state = slice(base, base + n_state_rows)
        base += n_state_rows

        # Terminal braking-capacity row: the tail of the horizon must keep
        # enough deceleration authority to stop s before the cap, otherwise
        # shifted warm starts paint the timing law into a corner at the path
        # end.  Coefficients depend on the iterate; rewritten per iteration.
        self._sl_brake = slice(base, base + 1)
        base += 1

        self._sl_coll = slice(base, base + n_coll)
        if n_coll:
            g[base:base + n_coll, self.off_sig:self.off_sig + self.n_sig] = -np.eye(self.n_sig)
        base += n_coll

        self._sl_sig = slice(base, base + n_sig_rows)
        if n_sig_rows:
            g[base:base + n_sig_rows, self.off_sig:self.off_sig + self.n_sig] = -np.eye(self.n_sig)
        base += n_sig_rows

        self._sl_lam = slice(base, base + n_lam_rows)
        if n_lam_rows:
            g[base:base + self.n_lam, self.off_lam:self.off_lam + self.n_lam] = np.eye(self.n_lam)
            g[base + self.n_lam:base + 2 * self.n_lam,
              self.off_lam:self.off_lam + self.n_lam] = -np.eye(self.n_lam)
        base += n_lam_rows

        self.g_mat = g
        self.m_rows = m

    # -- rollouts --------------------------------------------------------
    def _rollout(self, x0, u_traj, with_jac):
        states, stage_points = rollout_rk4(x0, u_traj, self.vehicle, self.cfg.delta)
        if not with_jac:
            return states, None, None
        a_list, b_list = discrete_jacobians_batch(stage_points, u_traj, self.vehicle, self.cfg.delta)
        return states, a_list, b_list

    def _rollout_timing(self, z0, v_traj):
        n = self.cfg.horizon
        zs = np.empty((n + 1, 2))
        zs[:, 0] = z0[0] + self.cfg.delta * self._steps_col[:, 0] * z0[1] + self.tz_s @ v_traj
        zs[:, 1] = z0[1] + self.tz_sd @ v_traj
        return zs

    def _stop_point(self, s: float, sd: float) -> float:
        """Where s comes to rest under maximum braking from (s, s_dot)."""
        cfg = self.cfg
        brake = -cfg.nu_min
        sd = max(sd, cfg.s_dot_floor)
        return s + (sd**2 - cfg.s_dot_floor**2) / (2.0 * brake) + 0.5 * cfg.delta * sd

    def _set_timing_corridor(self, z0):
        """Per-solve brake goal and effective cap for the timing law.

        Braking must land at or below the goal, which sits half a headroom
        under the cap so the perpetual s_dot-floor drift has room while
        parked.  Both yield, by the microscopic amount physics forces, when
        the measured state can no longer stop short of them; demanding more
        would only declare an unavoidable drift infeasible.
        """
        cfg = self.cfg
        reserve = (cfg.horizon + 1) * cfg.delta * cfg.s_dot_floor + 1e-7
        floor_stop = self._stop_point(float(z0[0]), float(z0[1]))
        self._brake_goal = max(0.5 * cfg.s_cap_headroom, floor_stop + reserve)
        self._cap_eff = self._brake_goal + 0.5 * cfg.s_cap_headroom

    def _brake_ceiling(self, s_next: float) -> float:
        """Highest s_dot from which s can still stop short of the brake goal."""
        cfg = self.cfg
        brake = -cfg.nu_min
        room = max(self._brake_goal - s_next, 0.0)
        disc = (0.5 * cfg.delta * brake) ** 2 + 1.9 * brake * room + cfg.s_dot_floor**2
        ceil = -0.5 * cfg.delta * brake + np.sqrt(disc)
        return float(min(max(ceil, cfg.s_dot_floor), cfg.s_dot_max))

    def _repair_timing(self, z0, v_traj):
        """Clip virtual inputs so the timing rollout stays inside its box
        and keeps enough braking authority to stop before the cap."""
        cfg = self.cfg
        delta = cfg.delta
        cap = self._cap_eff
        s, sd = float(z0[0]), float(z0[1])
        ok = True
        for k in range(cfg.horizon):
            lo = max(cfg.nu_min, (cfg.s_dot_floor - sd) / delta,
                     2.0 * (self.path.s0 - s - delta * sd) / delta**2)
            # Pessimistic next-s estimate (full acceleration) so the chosen
            # ceiling still holds after the delta^2 term lands.
            sd_ceil = self._brake_ceiling(s + delta * sd + 0.5 * delta**2 * cfg.nu_max)
            hi = min(cfg.nu_max, (sd_ceil - sd) / delta,
                     2.0 * (cap - s - delta * sd) / delta**2)
            if lo > hi:
                # Brake as hard as the floor allows; headroom absorbs the rest.
                nu = float(np.clip((cfg.s_dot_floor - sd) / delta, cfg.nu_min, cfg.nu_max))
                ok = False
            else:
                nu = float(np.clip(v_traj[k], lo, hi))
            v_traj[k] = nu
            s = s + delta * sd + 0.5 * delta**2 * nu
            sd = sd + delta * nu
        return v_traj, ok

    # -- cost pieces -----------------------------------------------------
    def _residuals(self, states, zs, u_traj, v_traj):
        n = self.cfg.horizon
        res = np.empty((n, 10))
        p_vals = self.path.eval_many(zs[:n, 0])
        res[:, 0:4] = states[:n][:, _OUTPUT_IDX] - p_vals
        res[:, 4] = zs[:n, 0]
        res[:, 5:9] = u_traj
        res[:, 9] = v_traj
        return res

    def _tracking_cost(self, res):
        scaled = res @ self.w_chol.T
        return float(np.sum(scaled * scaled))

    def _collision_eval(self, states, lambdas, obs_data, with_dlam=False):
        """K values, center gradients, and (optionally) lam derivatives."""
        n1 = self.cfg.horizon + 1
        n_obs = len(obs_data)
        ks = np.empty((n_obs, n1))
        grads = np.empty((n_obs, n1, 3))
        dks = np.empty((n_obs, n1)) if with_dlam else None
        positions = states[:, 0:3]
        for l, obs in enumerate(obs_data):
            lam = np.clip(lambdas[l], obs.lam_floor, 1.0)
            ks[l], grads[l] = k_fused_many(lam, self.robot_shape, positions,
                                           obs.shape, obs.centers)
            if with_dlam:
                h = 1e-4
                hi = np.minimum(lam + h, 1.0)
                lo = np.maximum(lam - h, obs.lam_floor)
                k_hi, _ = k_fused_many(hi, self.robot_shape, positions, obs.shape, obs.centers)
                k_lo, _ = k_fused_many(lo, self.robot_shape, positions, obs.shape, obs.centers)
                span = np.maximum(hi - lo, 1e-12)
                dks[l] = (k_hi - k_lo) / span
                # Convex curvature of K in lambda; the cost carries none, so
                # the QP needs it to stop chasing the flat linearized slope.
                self._kpp[l] = np.maximum(
                    (k_hi - 2.0 * ks[l] + k_lo) / (0.5 * span) ** 2, 0.0)
        return ks, grads, dks

    def _penalty(self, ks):
        if ks is None or ks.size == 0:
            return 0.0, 0.0
        viol = np.maximum(0.0, ks + self.cfg.collision_margin)
        pen = float(self.cfg.soft_penalty_l1 * viol.sum()
                    + self.cfg.soft_penalty_l2 * np.sum(viol * viol))
        return pen, float(viol.max())

    # -- main entry -------------------------------------------------------
    def solve(self, x0, z0, lambda_bar=None, obstacles=(), t_now: float = 0.0,
              warm: SolveOutput | None = None, shift_warm: bool = False) -> SolveOutput:
        t_start = time.perf_counter()
        cfg = self.cfg
        n = cfg.horizon
        x0 = np.asarray(x0, dtype=float).reshape(NX)
        z0 = np.asarray(z0, dtype=float).reshape(2)
        obstacles = list(obstacles)
        if len(obstacles) != self.n_obstacles:
            raise ValueError(f"solver built for {self.n_obstacles} obstacles, got {len(obstacles)}")
        times = t_now + cfg.delta * np.arange(n + 1)
        obs_data = [_ObstacleData(ob, times) for ob in obstacles]

        if lambda_bar is None:
            lambdas = np.full((self.n_obstacles, n + 1), 0.5)
        else:
            lambdas = np.array(lambda_bar, dtype=float).reshape(self.n_obstacles, n + 1)
        if lambdas.size and (np.any(lambdas < 0.0) or np.any(lambdas > 1.0)):
            raise ValueError("lambda_bar entries must lie in [0, 1]")

        if warm is not None:
            u_traj = warm.inputs.copy()
            v_traj = warm.virtual_inputs.copy()
            if shift_warm:
                u_traj[:-1] = u_traj[1:]
                v_traj[:-1] = v_traj[1:]
        else:
            u_traj = np.zeros((n, NU))
            v_traj = np.zeros(n)
        u_traj = np.clip(u_traj, cfg.u_min, cfg.u_max)
        v_traj = np.clip(v_traj, cfg.nu_min, cfg.nu_max)
        self._set_timing_corridor(z0)
        v_traj, timing_ok = self._repair_timing(z0, v_traj)

        infeasible = False
        merit_history = []
        iterations = 0
        sig_qp = np.zeros(self.n_sig)
        stagnant = 0

        # Current candidate, updated in place by accepted line-search steps;
        # the collision evaluation rides along to avoid recomputing it.
        states, stage_pts = rollout_rk4(x0, u_traj, self.vehicle, cfg.delta)
        zs = self._rollout_timing(z0, v_traj)
        res = self._residuals(states, zs, u_traj, v_traj)
        ks = grads = dks = None
        if obs_data:
            ks, grads, dks = self._collision_eval(states, lambdas, obs_data,
                                                  with_dlam=self.joint)

        for it in range(cfg.sqp_max_iters):
            iterations = it + 1
            a_list, b_list = discrete_jacobians_batch(stage_pts, u_traj, self.vehicle, cfg.delta)

            try:
                step, qp_res, model_drop, grad_lag = self._build_and_solve_qp(
                    states, zs, u_traj, v_traj, res, ks, grads, dks, a_list, b_list, lambdas)
            except np.linalg.LinAlgError:
                break
            if qp_res.status is QpStatus.INFEASIBLE_START:
                infeasible = True
                break
            sig_qp = step[self.off_sig:self.off_sig + self.n_sig]

            pen0, _ = self._penalty(ks)
            merit0 = self._tracking_cost(res) + pen0
            if not merit_history:
                merit_history.append(merit0)

            if model_drop <= 1e-11 * (1.0 + abs(merit0)):
                break  # at the QP model's numerical floor

            du = step[:self.n_u].reshape(n, NU)
            dv = step[self.off_v:self.off_v + self.n_v]
            dlam = (step[self.off_lam:self.off_lam + self.n_lam]
                    .reshape(self.n_obstacles, n + 1) if self.joint and self.n_lam else None)

            alpha = 1.0
            accepted = False
            ks_try = None
            for bt in range(cfg.max_backtracks):
                if bt == 2 and model_drop <= 1e-6 * (1.0 + abs(merit0)):
                    break  # chasing noise; not worth more rollouts
                u_try = u_traj + alpha * du
                v_try = v_traj + alpha * dv
                lam_try = lambdas if dlam is None else np.clip(lambdas + alpha * dlam, 0.0, 1.0)
                states_try, stage_try = rollout_rk4(x0, u_try, self.vehicle, cfg.delta)
                zs_try = self._rollout_timing(z0, v_try)
                res_try = self._residuals(states_try, zs_try, u_try, v_try)
                if obs_data:
                    ks_try, grads_try, dks_try = self._collision_eval(
                        states_try, lam_try, obs_data, with_dlam=self.joint)
                    pen_try, _ = self._penalty(ks_try)
                else:
                    pen_try = 0.0
                merit_try = self._tracking_cost(res_try) + pen_try
                if merit_try <= merit0 - cfg.armijo * alpha * max(model_drop, 0.0) + 1e-12:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break

            u_traj, v_traj = u_try, v_try
            states, stage_pts, zs, res = states_try, stage_try, zs_try, res_try
            if obs_data:
                ks, grads, dks = ks_try, grads_try, dks_try
            if dlam is not None:
                lambdas = lam_try
            merit_history.append(merit_try)

            stagnant = stagnant + 1 if merit0 - merit_try <= 1e-10 * (1.0 + abs(merit0)) else 0
            if stagnant >= 2:
                break
            overshoot = self._collision_overshoot(ks_try, sig_qp)
            if grad_lag <= cfg.kkt_tol and overshoot <= cfg.collision_feas_tol:
                break

        if obs_data:
            ks_fin, _, _ = self._collision_eval(states, lambdas, obs_data)
            pen, slack_max = self._penalty(ks_fin)
        else:
            ks_fin = np.zeros((0, 0))
            pen, slack_max = 0.0, 0.0
        cost = self._tracking_cost(res) + pen

        kkt_residual = self._kkt_stationarity()
        overshoot_fin = self._collision_overshoot(ks_fin if obs_data else None, sig_qp)
        if infeasible or (not timing_ok and self._timing_violation(zs) > 1e-9):
            status = SolveStatus.INFEASIBLE
        elif kkt_residual <= cfg.kkt_tol and overshoot_fin <= cfg.collision_feas_tol:
            status = SolveStatus.CONVERGED
        else:
            status = SolveStatus.MAX_ITERS

        return SolveOutput(
            states=states, timing_states=zs, inputs=u_traj.copy(),
            virtual_inputs=v_traj.copy(), lambda_params=lambdas.copy(),
            cost=cost, kkt_residual=float(kkt_residual), status=status,
            wall_time=time.perf_counter() - t_start, slack_max=slack_max,
            collision_values=ks_fin, merit_history=merit_history,
            sqp_iterations=iterations)

    # -- SQP internals -----------------------------------------------------
    def _build_and_solve_qp(self, states, zs, u_traj, v_traj, res, ks, grads,
                            dks, a_list, b_list, lambdas):
        cfg = self.cfg
        n = cfg.horizon
        n_var = self.n_var

        # State sensitivities by forward condensing, in scaled coordinates.
        sx = self._sx_buf
        b_scaled = b_list * self._u_scale4[None, None, :]
        for k in range(n):
            np.matmul(a_list[k], sx[k], out=sx[k + 1])
            sx[k + 1][:, NU * k:NU * k + NU] += b_scaled[k]

        jac = self._jac_buf
        p_slopes = self.path.derivative_many(zs[:n, 0])
        jac[:, 0:4, :self.n_u] = sx[:n][:, _OUTPUT_IDX, :]
        jac[:, 0:4, self.n_u:] = -p_slopes[:, :, None] * self._tz_s_sc[:n][:, None, :]
        jac[:, 4, self.n_u:] = self._tz_s_sc[:n]

        scaled_jac = (self.w_chol[None, :, :] @ jac).reshape(10 * n, self.n_uv)
        scaled_res = (res @ self.w_chol.T).reshape(-1)
        h_uv = 2.0 * scaled_jac.T @ scaled_jac
        g_uv = 2.0 * scaled_jac.T @ scaled_res

        q_mat = self._q_buf
        q_mat[:self.n_uv, :self.n_uv] = h_uv
        q_mat[:self.n_uv, :self.n_uv].flat[::self.n_uv + 1] += 1e-9
        c_vec = np.zeros(n_var)
        c_vec[:self.n_uv] = g_uv
        if self.joint and self.n_lam:
            sl = slice(self.off_lam, self.off_lam + self.n_lam)
            q_mat[sl, sl] = cfg.lambda_reg * np.eye(self.n_lam)
            # Exact-penalty curvature of the active collision rows in lambda.
            pen_w = cfg.soft_penalty_l1 + 2.0 * cfg.soft_penalty_l2 * np.maximum(
                ks + cfg.collision_margin, 0.0).reshape(-1)
            diag = q_mat[sl, sl].flat
            diag[::self.n_lam + 1] += pen_w * self._kpp.reshape(-1)
        if self.n_sig:
            sl = slice(self.off_sig, self.off_sig + self.n_sig)
            ridge = 2.0 * cfg.soft_penalty_l2 if cfg.soft_penalty_l2 > 0 else 1e-9
            q_mat[sl, sl] = ridge * np.eye(self.n_sig)
            c_vec[self.off_sig:self.off_sig + self.n_sig] = cfg.soft_penalty_l1

        g_mat = self.g_mat
        h_vec = self._h_buf
        h_vec[self._sl_u] = np.concatenate([(cfg.u_max - u_traj).reshape(-1),
                                            (u_traj - cfg.u_min).reshape(-1)])
        h_vec[self._sl_v] = np.concatenate([cfg.nu_max - v_traj, v_traj - cfg.nu_min])
        h_vec[self._sl_z] = np.concatenate([
            self._cap_eff - zs[1:, 0], zs[1:, 0] - self.path.s0,
            cfg.s_dot_max - zs[1:, 1], zs[1:, 1] - cfg.s_dot_floor])

        # Terminal braking-capacity row, linearized at the current iterate:
        # s_N + (s_dot_N^2 - floor^2)/(2*brake) + delta*s_dot_N/2 <= goal.
        brake = -cfg.nu_min
        s_n, sd_n = zs[n]
        coef_sd = sd_n / brake + 0.5 * cfg.delta
        g_mat[self._sl_brake.start, self.off_v:self.off_v + self.n_v] = \
            self._tz_s_sc[n] + coef_sd * self._tz_sd_sc[n]
        brake_room = (self._brake_goal - s_n
                      - (max(sd_n, cfg.s_dot_floor)**2 - cfg.s_dot_floor**2) / (2.0 * brake)
                      - 0.5 * cfg.delta * sd_n)
        # The quadratic expression is under-enforced by its linearization, so
        # a shifted warm start can sit slightly outside; never demand more
        # than "no worsening" or that residue reads as infeasibility.
        h_vec[self._sl_brake] = max(brake_room, 0.0)

        if self._state_idx:
            r = self._sl_state.start
            for k in range(1, n + 1):
                for i in self._state_idx:
                    g_mat[r, :self.n_u] = sx[k][i]
                    h_vec[r] = self._state_hi[i] - states[k, i]
                    g_mat[r + 1, :self.n_u] = -sx[k][i]
                    h_vec[r + 1] = states[k, i] - self._state_lo[i]
                    r += 2

        x_start = np.zeros(n_var)
        if self.n_sig:
            margin = cfg.collision_margin
            stages = self.coll_stages
            # rows[l, j] = grads[l, k_j] @ sx[k_j, 0:3, :], batched.
            sx_pos = sx[stages][:, 0:3, :]
            coll_rows = np.einsum("ljc,jcu->lju", grads[:, stages], sx_pos,
                                  optimize=True).reshape(self.n_sig, self.n_u)
            g_mat[self._sl_coll, :self.n_u] = coll_rows
            ks_sel = ks[:, stages].reshape(-1)
            h_vec[self._sl_coll] = -margin - ks_sel
            x_start[self.off_sig:self.off_sig + self.n_sig] = np.maximum(0.0, ks_sel + margin)
            if self.joint and self.n_lam:
                r = self._sl_coll.start
                for l in range(self.n_obstacles):
                    for k in stages:
                        g_mat[r, self.off_lam + l * (n + 1) + k] = dks[l, k]
                        r += 1
            h_vec[self._sl_sig] = 0.0
        if self.joint and self.n_lam:
            lam_flat = lambdas.reshape(-1)
            h_vec[self._sl_lam.start:self._sl_lam.start + self.n_lam] = 1.0 - lam_flat
            h_vec[self._sl_lam.start + self.n_lam:self._sl_lam.stop] = lam_flat

        qp_res = solve_qp(q_mat, c_vec, g_mat, h_vec, x_start,
                          working_set=self._working_set)
        self._working_set = qp_res.working_set
        self._last_g_uv = g_uv
        self._last_h = h_vec

        zeta = qp_res.x
        model_drop = (0.5 * x_start @ q_mat @ x_start + c_vec @ x_start
                      - 0.5 * zeta @ q_mat @ zeta - c_vec @ zeta)
        # Stationarity of the Lagrangian at the linearization point (the QP
        # optimality maps it onto the Hessian-weighted step), in the scaled
        # coordinates and relative to the cost-gradient magnitude.
        grad_scale = 1.0 + float(np.max(np.abs(g_uv)))
        grad_lag = float(np.max(np.abs((q_mat @ zeta)[:self.n_uv]))) / grad_scale
        step = qp_res.x * self.var_scale
        return step, qp_res, float(model_drop), grad_lag

    def _kkt_stationarity(self):
        """Scaled stationarity of the Lagrangian at the last linearization.

        Projects the cost gradient onto the cone spanned by the gradients of
        the constraints active there (nonnegative least squares); the norm of
        what remains is the honest first-order residual, free of the
        Hessian-conditioning inflation a step-based proxy would carry.
        Approximate by one step when the final line-search move was nonzero,
        which is second order once steps are small.
        """
        g_uv = getattr(self, "_last_g_uv", None)
        if g_uv is None:
            return np.inf
        scale = 1.0 + float(np.max(np.abs(g_uv)))
        rows = np.where(self._last_h <= 1e-7)[0]
        if rows.size == 0:
            return float(np.max(np.abs(g_uv))) / scale
        a_mat = self.g_mat[rows][:, :self.n_uv].T
        # Fast path: unconstrained projection with the negative multipliers
        # clipped overestimates the true cone distance; fall back to the
        # exact nonnegative fit only when that bound misses the tolerance.
        mu = np.linalg.lstsq(a_mat, -g_uv, rcond=None)[0]
        resid = g_uv + a_mat @ np.maximum(mu, 0.0)
        kkt = float(np.max(np.abs(resid))) / scale
        # The clipped projection overestimates; pay for the exact cone fit
        # only when the bound is a near miss of the tolerance.
        if kkt <= self.cfg.kkt_tol or kkt > 100.0 * self.cfg.kkt_tol or not np.any(mu < 0.0):
            return kkt
        mu, _ = scipy.optimize.nnls(a_mat, -g_uv)
        resid = g_uv + a_mat @ mu
        return float(np.max(np.abs(resid))) / scale

    def _collision_overshoot(self, ks_new, sig_qp):
        """Nonlinear constraint violation beyond the slack the QP chose.

        Stage 0 is excluded where it is not a QP stage: its value is fixed
        by the measured state and no decision can change it.
        """
        if ks_new is None or ks_new.size == 0:
            return 0.0
        need = np.maximum(0.0, ks_new[:, self.coll_stages] + self.cfg.collision_margin).reshape(-1)
        have = np.maximum(sig_qp, 0.0)
        return float(np.max(np.maximum(need - have, 0.0)))

    def _timing_violation(self, zs):
        cfg = self.cfg
        return max(
            float(np.max(zs[1:, 0] - self._cap_eff, initial=0.0)),
            float(np.max(self.path.s0 - zs[1:, 0], initial=0.0)),
            float(np.max(zs[1:, 1] - cfg.s_dot_max, initial=0.0)),
            float(np.max(cfg.s_dot_floor - zs[1:, 1], initial=0.0)),
        )


def solve_parameterized(x0, z0, lambda_bar, obstacles, t_now, warm,
                        cfg: OcpConfig, path: Path, vehicle: VehicleParams,
                        robot_shape=None) -> SolveOutput:
    """One-shot parameterized solve; builds a fresh solver instance."""
    solver = OcpSolver(cfg, path, vehicle, robot_shape, n_obstacles=len(obstacles))
    return solver.solve(x0, z0, lambda_bar, obstacles, t_now, warm)


def solve_joint(x0, z0, obstacles, t_now, warm, cfg: OcpConfig, path: Path,
                vehicle: VehicleParams, robot_shape=None,
                lambda_init=None) -> SolveOutput:
    """One-shot joint solve with lambda as regularized decision variables."""
    solver = OcpSolver(cfg, path, vehicle, robot_shape,
                       n_obstacles=len(obstacles), joint=True)
    return solver.solve(x0, z0, lambda_init, obstacles, t_now, warm)
