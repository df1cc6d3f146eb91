import numpy as np
import pytest

from capf.paths import Path, demo_path, from_waypoints, straight_line_path


class TestDemoPath:
    def test_endpoint_values(self):
        # Frozen from the closed-form expression evaluated independently.
        p = demo_path()
        end = p.eval(0.0)
        assert end[0] == pytest.approx(0.3488971408256343, abs=1e-12)
        assert end[1] == pytest.approx(0.35820964036091335, abs=1e-12)
        assert end[2] == pytest.approx(0.5)
        assert end[3] == pytest.approx(0.7418289647878568, abs=1e-12)
        start = p.eval(-1.0)
        assert start[0] == pytest.approx(-0.11200203233251123, abs=1e-12)
        assert start[1] == pytest.approx(-0.24155135826076254, abs=1e-12)
        assert start[3] == pytest.approx(2.1325729012034778, abs=1e-12)

    def test_constant_altitude(self, rng):
        p = demo_path()
        for s in rng.uniform(-1.0, 0.0, 100):
            assert p.eval(s)[2] == pytest.approx(0.5)

    def test_clamping(self):
        p = demo_path()
        assert np.allclose(p.eval(-2.0), p.eval(-1.0))
        assert np.allclose(p.eval(0.1), p.eval(0.0))

    def test_continuity_scan(self):
        # Finite differences at 1000 interior points stay bounded: no jumps
        # beyond 10x the local slope scale.
        p = demo_path()
        s = np.linspace(-1.0, 0.0, 1002)
        vals = p.eval_many(s)
        diffs = np.linalg.norm(np.diff(vals, axis=0), axis=1)
        local = np.maximum((diffs[:-1] + diffs[1:]) / 2.0, 1e-9)
        assert np.all(diffs[1:] <= 10.0 * local)
        assert np.all(np.isfinite(vals))

    def test_eval_many_matches_scalar(self, rng):
        p = demo_path()
        s = rng.uniform(-1.0, 0.0, 50)
        many = p.eval_many(s)
        for i, si in enumerate(s):
            assert np.allclose(many[i], p.eval(si))

    def test_derivative_matches_fd(self):
        p = demo_path()
        for s in (-0.9, -0.5, -0.1):
            d = p.derivative(s)
            fd = (p.eval(s + 1e-6) - p.eval(s - 1e-6)) / 2e-6
            assert np.allclose(d, fd)


class TestStraightLine:
    def test_midpoint(self):
        p = straight_line_path([-1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0])
        assert np.allclose(p.eval(-0.5), [-0.5, 0.0, 1.0, 0.0])


class TestWaypointPath:
    def test_interpolates_waypoints(self):
        s = np.array([-1.0, -0.5, 0.0])
        pts = np.array([[0.0, 0.0, 0.5, 0.0], [1.0, 0.5, 0.5, 0.1], [2.0, 0.0, 0.5, 0.2]])
        p = from_waypoints(s, pts)
        for si, pi in zip(s, pts):
            assert np.allclose(p.eval(si), pi, atol=1e-12)
        assert p.s0 == -1.0

    def test_rejects_bad_samples(self):
        pts = np.zeros((3, 4))
        with pytest.raises(ValueError):
            from_waypoints([-1.0, -1.0, 0.0], pts)
        with pytest.raises(ValueError):
            from_waypoints([-1.0, -0.5, -0.1], pts)
        with pytest.raises(ValueError):
            from_waypoints([-1.0, 0.0], pts)

    def test_differentiable(self):
        s = np.linspace(-1.0, 0.0, 6)
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((6, 4))
        pts[:, 2] = 0.5
        p = from_waypoints(s, pts)
        grid = np.linspace(-1.0, 0.0, 1002)
        vals = p.eval_many(grid)
        diffs = np.linalg.norm(np.diff(vals, axis=0), axis=1)
        local = np.maximum((diffs[:-1] + diffs[1:]) / 2.0, 1e-9)
        assert np.all(diffs[1:] <= 10.0 * local)


class TestPathType:
    def test_rejects_positive_s0(self):
        with pytest.raises(ValueError):
            Path(lambda s: np.zeros(4), 0.5)
