"""Ellipsoidal collision-avoidant path following.

A numpy/scipy implementation of three-dimensional ellipsoidal collision
avoidance inside a model predictive path-following controller: the
convex overlap certificate K(lambda) with its Minkowski-sum form, a
quadrotor model with attitude-loop lags, a Gauss-Newton SQP over a
condensed shooting transcription with a warm-started active-set QP, the
two-stage lambda/OCP alternation, and a closed-loop simulation harness.
"""

from .dynamics import (PathTimingState, QuadrotorInput, QuadrotorState,
                       VehicleParams, f_continuous, jacobians, output,
                       step_rk4, step_timing)
from .geometry import (AuxiliaryEllipsoid, Classification, Ellipsoid,
                       OverlapVerdict, contains, dk_dlambda, intersects_oracle,
                       k_fused, k_minkowski, minimize_k, minkowski_outer)
from .controller import ControlMode, Controller, TWO_STAGE
from .ocp import (ObstacleTrack, OcpConfig, OcpSolver, SolveOutput,
                  SolveStatus, default_config, solve_joint,
                  solve_parameterized, stage_cost)
from .paths import Path, demo_path, from_waypoints
from .scenarios import builtin_scenario, load_scenario
from .simulator import Scenario, SimLog, metrics, run

__all__ = [
    "AuxiliaryEllipsoid", "Classification", "ControlMode", "Controller",
    "Ellipsoid", "ObstacleTrack", "OcpConfig", "OcpSolver", "OverlapVerdict",
    "Path", "PathTimingState", "QuadrotorInput", "QuadrotorState", "Scenario",
    "SimLog", "SolveOutput", "SolveStatus", "TWO_STAGE", "VehicleParams",
    "builtin_scenario", "contains", "default_config", "demo_path",
    "dk_dlambda", "f_continuous", "from_waypoints", "intersects_oracle",
    "jacobians", "k_fused", "k_minkowski", "load_scenario", "metrics",
    "minimize_k", "minkowski_outer", "output", "run", "solve_joint",
    "solve_parameterized", "stage_cost", "step_rk4", "step_timing",
]
