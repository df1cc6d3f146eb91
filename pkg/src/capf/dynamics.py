"""Quadrotor point-mass model with attitude-loop lags, plus the path timing law.

The vehicle state is a 9-vector [x y z, vx vy vz, roll pitch yaw]; the
input is [thrust offset from hover, roll setpoint, pitch setpoint, yaw
rate setpoint].  Roll and pitch track their setpoints through first-order
lags that stand in for the onboard attitude loop.  The path parameter
evolves as a double integrator driven by a virtual input and is
discretized exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

NX = 9
NU = 4


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 0.031      # kg, Crazyflie 2.1 with marker deck
    gravity: float = 9.81    # m/s^2
    roll_lag: float = 0.1    # s
    pitch_lag: float = 0.1   # s

    def __post_init__(self):
        for name in ("mass", "gravity", "roll_lag", "pitch_lag"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def to_dict(self) -> dict:
        return {"mass": self.mass, "gravity": self.gravity,
                "roll_lag": self.roll_lag, "pitch_lag": self.pitch_lag}

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        return cls(**data)


@dataclass
class QuadrotorState:
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray  # roll, pitch, yaw [rad]

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.attitude])

    @classmethod
    def from_array(cls, x) -> "QuadrotorState":
        x = np.asarray(x, dtype=float)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:9].copy())


@dataclass
class QuadrotorInput:
    thrust_delta: float = 0.0
    roll_cmd: float = 0.0
    pitch_cmd: float = 0.0
    yaw_rate_cmd: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.thrust_delta, self.roll_cmd, self.pitch_cmd, self.yaw_rate_cmd])

    @classmethod
    def from_array(cls, u) -> "QuadrotorInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]), float(u[2]), float(u[3]))


class PathTimingState(NamedTuple):
    s: float
    s_dot: float


def f_continuous(x, u, p: VehicleParams) -> np.ndarray:
    """State derivative. Hover (all zeros) is an exact fixed point."""
    phi, theta, psi = x[6], x[7], x[8]
    sph, cph = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)
    sps, cps = math.sin(psi), math.cos(psi)
    thrust = u[0] / p.mass + p.gravity
    out = np.empty(NX)
    out[0:3] = x[3:6]
    out[3] = (sph * sps + cph * cps * sth) * thrust
    out[4] = (cph * sps * sth - cps * sph) * thrust
    out[5] = -p.gravity + cph * cth * thrust
    out[6] = (u[1] - phi) / p.roll_lag
    out[7] = (u[2] - theta) / p.pitch_lag
    out[8] = u[3]
    return out


def step_rk4(x, u, p: VehicleParams, delta: float) -> np.ndarray:
    """Classical 4-stage Runge-Kutta step with zero-order-hold input."""
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    k1 = f_continuous(x, u, p)
    k2 = f_continuous(x + 0.5 * delta * k1, u, p)
    k3 = f_continuous(x + 0.5 * delta * k2, u, p)
    k4 = f_continuous(x + delta * k3, u, p)
    return x + (delta / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_timing(z, nu: float, delta: float):
    """Exact zero-order-hold step of the double-integrator timing law."""
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    s, s_dot = z[0], z[1]
    return np.array([s + delta * s_dot + 0.5 * delta**2 * nu,
                     s_dot + delta * nu])


def output(x) -> np.ndarray:
    """Controlled output: position and yaw."""
    x = np.asarray(x, dtype=float)
    return np.array([x[0], x[1], x[2], x[8]])


# Output Jacobian; constant selection of position rows and yaw.
OUTPUT_JACOBIAN = np.zeros((4, NX))
OUTPUT_JACOBIAN[0, 0] = OUTPUT_JACOBIAN[1, 1] = OUTPUT_JACOBIAN[2, 2] = 1.0
OUTPUT_JACOBIAN[3, 8] = 1.0
OUTPUT_JACOBIAN.setflags(write=False)


def _stage_jacobians(x, u, p: VehicleParams):
    phi, theta, psi = x[6], x[7], x[8]
    sph, cph = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)
    sps, cps = math.sin(psi), math.cos(psi)
    thrust = u[0] / p.mass + p.gravity

    fx = np.zeros((NX, NX))
    fx[0, 3] = fx[1, 4] = fx[2, 5] = 1.0
    fx[3, 6] = (cph * sps - sph * cps * sth) * thrust
    fx[3, 7] = cph * cps * cth * thrust
    fx[3, 8] = (sph * cps - cph * sps * sth) * thrust
    fx[4, 6] = (-sph * sps * sth - cps * cph) * thrust
    fx[4, 7] = cph * sps * cth * thrust
    fx[4, 8] = (cph * cps * sth + sps * sph) * thrust
    fx[5, 6] = -sph * cth * thrust
    fx[5, 7] = -cph * sth * thrust
    fx[6, 6] = -1.0 / p.roll_lag
    fx[7, 7] = -1.0 / p.pitch_lag

    fu = np.zeros((NX, NU))
    fu[3, 0] = (sph * sps + cph * cps * sth) / p.mass
    fu[4, 0] = (cph * sps * sth - cps * sph) / p.mass
    fu[5, 0] = cph * cth / p.mass
    fu[6, 1] = 1.0 / p.roll_lag
    fu[7, 2] = 1.0 / p.pitch_lag
    fu[8, 3] = 1.0
    return fx, fu


def jacobians(x, u, p: VehicleParams, delta: float):
    """Exact Jacobians of the RK4 step, chained through its four stages."""
    eye = np.eye(NX)
    k1 = f_continuous(x, u, p)
    x2 = x + 0.5 * delta * k1
    k2 = f_continuous(x2, u, p)
    x3 = x + 0.5 * delta * k2
    k3 = f_continuous(x3, u, p)
    x4 = x + delta * k3

    fx1, fu1 = _stage_jacobians(x, u, p)
    fx2, fu2 = _stage_jacobians(x2, u, p)
    fx3, fu3 = _stage_jacobians(x3, u, p)
    fx4, fu4 = _stage_jacobians(x4, u, p)

    dk1_dx = fx1
    dk2_dx = fx2 @ (eye + 0.5 * delta * dk1_dx)
    dk3_dx = fx3 @ (eye + 0.5 * delta * dk2_dx)
    dk4_dx = fx4 @ (eye + delta * dk3_dx)
    a_d = eye + (delta / 6.0) * (dk1_dx + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx)

    dk1_du = fu1
    dk2_du = fu2 + fx2 @ (0.5 * delta * dk1_du)
    dk3_du = fu3 + fx3 @ (0.5 * delta * dk2_du)
    dk4_du = fu4 + fx4 @ (delta * dk3_du)
    b_d = (delta / 6.0) * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return a_d, b_d


# Exact timing-law transition: z+ = TIMING_A @ z + TIMING_B * nu.
def timing_matrices(delta: float):
    a = np.array([[1.0, delta], [0.0, 1.0]])
    b = np.array([0.5 * delta**2, delta])
    return a, b


def _f9(x, u0, u1, u2, u3, m, g, t_r, t_p):
    # Scalar-math twin of f_continuous; the horizon rollout is the hot path
    # and 9-element numpy temporaries cost more than the arithmetic.
    phi, theta, psi = x[6], x[7], x[8]
    sph, cph = math.sin(phi), math.cos(phi)
    sth, cth = math.sin(theta), math.cos(theta)
    sps, cps = math.sin(psi), math.cos(psi)
    thrust = u0 / m + g
    return (x[3], x[4], x[5],
            (sph * sps + cph * cps * sth) * thrust,
            (cph * sps * sth - cps * sph) * thrust,
            -g + cph * cth * thrust,
            (u1 - phi) / t_r,
            (u2 - theta) / t_p,
            u3)


def rollout_rk4(x0, u_traj, p: VehicleParams, delta: float):
    """Multi-step RK4 rollout that also returns the stage evaluation points.

    Returns (states (N+1, NX), stage_points (N, 4, NX)): the four points per
    step at which the vector field is evaluated, for batched sensitivity
    evaluation by ``discrete_jacobians_batch``.
    """
    n = len(u_traj)
    states = np.empty((n + 1, NX))
    stage_points = np.empty((n, 4, NX))
    m, g, t_r, t_p = p.mass, p.gravity, p.roll_lag, p.pitch_lag
    x = tuple(float(v) for v in x0)
    states[0] = x
    half = 0.5 * delta
    sixth = delta / 6.0
    for k in range(n):
        uk = u_traj[k]
        u0, u1, u2, u3 = float(uk[0]), float(uk[1]), float(uk[2]), float(uk[3])
        k1 = _f9(x, u0, u1, u2, u3, m, g, t_r, t_p)
        x2 = tuple(xi + half * ki for xi, ki in zip(x, k1))
        k2 = _f9(x2, u0, u1, u2, u3, m, g, t_r, t_p)
        x3 = tuple(xi + half * ki for xi, ki in zip(x, k2))
        k3 = _f9(x3, u0, u1, u2, u3, m, g, t_r, t_p)
        x4 = tuple(xi + delta * ki for xi, ki in zip(x, k3))
        k4 = _f9(x4, u0, u1, u2, u3, m, g, t_r, t_p)
        stage_points[k, 0] = x
        stage_points[k, 1] = x2
        stage_points[k, 2] = x3
        stage_points[k, 3] = x4
        x = tuple(xi + sixth * (a + 2.0 * b + 2.0 * c + d)
                  for xi, a, b, c, d in zip(x, k1, k2, k3, k4))
        states[k + 1] = x
    return states, stage_points


def _stage_jacobians_batch(points, u_traj, p: VehicleParams):
    """Vectorized continuous-time Jacobians at (M, NX) points, inputs repeated per stage."""
    m = points.shape[0]
    phi = points[:, 6]
    theta = points[:, 7]
    psi = points[:, 8]
    sph, cph = np.sin(phi), np.cos(phi)
    sth, cth = np.sin(theta), np.cos(theta)
    sps, cps = np.sin(psi), np.cos(psi)
    thrust = u_traj[:, 0] / p.mass + p.gravity

    fx = np.zeros((m, NX, NX))
    fx[:, 0, 3] = fx[:, 1, 4] = fx[:, 2, 5] = 1.0
    fx[:, 3, 6] = (cph * sps - sph * cps * sth) * thrust
    fx[:, 3, 7] = cph * cps * cth * thrust
    fx[:, 3, 8] = (sph * cps - cph * sps * sth) * thrust
    fx[:, 4, 6] = (-sph * sps * sth - cps * cph) * thrust
    fx[:, 4, 7] = cph * sps * cth * thrust
    fx[:, 4, 8] = (cph * cps * sth + sps * sph) * thrust
    fx[:, 5, 6] = -sph * cth * thrust
    fx[:, 5, 7] = -cph * sth * thrust
    fx[:, 6, 6] = -1.0 / p.roll_lag
    fx[:, 7, 7] = -1.0 / p.pitch_lag

    fu = np.zeros((m, NX, NU))
    fu[:, 3, 0] = (sph * sps + cph * cps * sth) / p.mass
    fu[:, 4, 0] = (cph * sps * sth - cps * sph) / p.mass
    fu[:, 5, 0] = cph * cth / p.mass
    fu[:, 6, 1] = 1.0 / p.roll_lag
    fu[:, 7, 2] = 1.0 / p.pitch_lag
    fu[:, 8, 3] = 1.0
    return fx, fu


def discrete_jacobians_batch(stage_points, u_traj, p: VehicleParams, delta: float):
    """Jacobians of every RK4 step of a rollout, chained with batched matmuls.

    stage_points comes from ``rollout_rk4``; returns (A (N, NX, NX),
    B (N, NX, NU)) matching per-step ``jacobians`` to rounding.
    """
    n = stage_points.shape[0]
    flat = stage_points.reshape(n * 4, NX)
    u_rep = np.repeat(np.asarray(u_traj, dtype=float), 4, axis=0)
    fx, fu = _stage_jacobians_batch(flat, u_rep, p)
    fx = fx.reshape(n, 4, NX, NX)
    fu = fu.reshape(n, 4, NX, NU)

    eye = np.eye(NX)
    half = 0.5 * delta
    dk1x = fx[:, 0]
    dk2x = fx[:, 1] @ (eye + half * dk1x)
    dk3x = fx[:, 2] @ (eye + half * dk2x)
    dk4x = fx[:, 3] @ (eye + delta * dk3x)
    a_d = eye + (delta / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)

    dk1u = fu[:, 0]
    dk2u = fu[:, 1] + fx[:, 1] @ (half * dk1u)
    dk3u = fu[:, 2] + fx[:, 2] @ (half * dk2u)
    dk4u = fu[:, 3] + fx[:, 3] @ (delta * dk3u)
    b_d = (delta / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return a_d, b_d
