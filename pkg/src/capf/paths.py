"""Parametric geometric paths p(s) over s in [s0, 0].

A path maps the scalar parameter to an output-space point
(x, y, z, yaw); evaluation outside the interval clamps to the nearest
endpoint.  The built-in demonstration path is an exponential hook at
constant altitude; user paths come from JSON waypoint lists interpolated
with C^2 cubic splines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline


@dataclass(frozen=True)
class Path:
    evaluator: Callable[[np.ndarray], np.ndarray]
    s0: float

    def __post_init__(self):
        if self.s0 > 0.0:
            raise ValueError(f"s0 must be <= 0, got {self.s0}")

    def eval(self, s: float) -> np.ndarray:
        """p(s) with s clamped into [s0, 0]."""
        s = min(max(float(s), self.s0), 0.0)
        return np.asarray(self.evaluator(np.asarray(s)), dtype=float).reshape(4)

    def eval_many(self, s_values) -> np.ndarray:
        s = np.clip(np.asarray(s_values, dtype=float), self.s0, 0.0)
        out = self.evaluator(s)
        return np.asarray(out, dtype=float).reshape(-1, 4)

    def derivative(self, s: float, h: float = 1e-6) -> np.ndarray:
        """dp/ds by central differences, with the stencil kept inside the interval."""
        s = min(max(float(s), self.s0 + h), -h)
        return (self.eval(s + h) - self.eval(s - h)) / (2.0 * h)

    def derivative_many(self, s_values, h: float = 1e-6) -> np.ndarray:
        s = np.clip(np.asarray(s_values, dtype=float), self.s0 + h, -h)
        return (self.eval_many(s + h) - self.eval_many(s - h)) / (2.0 * h)


def _demo_evaluator(s):
    s = np.asarray(s, dtype=float)
    decay = np.exp(-(6.0 * s + 5.8))
    base = 0.75 * s + 0.5
    swirl = decay * (2.25 * s + 2.175)
    half_sqrt2 = np.sqrt(2.0) / 2.0
    x = half_sqrt2 * (base - swirl)
    y = half_sqrt2 * (base + swirl)
    z = np.full_like(x, 0.5)
    yaw = np.arctan(-(4.0 / 30.0) * (135.0 * s + 108.0) * decay) + np.pi / 4.0
    return np.stack(np.broadcast_arrays(x, y, z, yaw), axis=-1)


def demo_path() -> Path:
    """Exponential-hook demonstration path at 0.5 m altitude, s0 = -1."""
    return Path(_demo_evaluator, -1.0)


def from_waypoints(s_samples, points) -> Path:
    """C^2 cubic-spline path through waypoints indexed by strictly increasing s ending at 0."""
    s_samples = np.asarray(s_samples, dtype=float)
    points = np.asarray(points, dtype=float)
    if s_samples.ndim != 1 or s_samples.size < 2:
        raise ValueError("need at least two s samples")
    if points.shape != (s_samples.size, 4):
        raise ValueError(f"points must be ({s_samples.size}, 4), got {points.shape}")
    if np.any(np.diff(s_samples) <= 0.0):
        raise ValueError("s_samples must be strictly increasing")
    if abs(s_samples[-1]) > 1e-12:
        raise ValueError("s_samples must end at 0")
    spline = CubicSpline(s_samples, points, axis=0)
    return Path(spline, float(s_samples[0]))


def straight_line_path(start, end, s0: float = -1.0) -> Path:
    """Linear test path from start to end over [s0, 0]."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)

    def evaluator(s):
        s = np.asarray(s, dtype=float)
        frac = (s - s0) / (0.0 - s0)
        return start + np.multiply.outer(frac, end - start)

    return Path(evaluator, s0)
