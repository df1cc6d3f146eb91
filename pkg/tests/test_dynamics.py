import numpy as np
import pytest
from scipy.integrate import solve_ivp

from capf.dynamics import (
    NU,
    NX,
    PathTimingState,
    QuadrotorInput,
    QuadrotorState,
    VehicleParams,
    f_continuous,
    jacobians,
    output,
    step_rk4,
    step_timing,
    timing_matrices,
)

P = VehicleParams()


def random_state_input(rng):
    # Flight-envelope sampling: tilt within the input bounds, and attitude
    # setpoints within 0.1 rad of the current angle (a 5 rad/s slew at the
    # 50 Hz control rate).  The single-step integration error grows with
    # the setpoint jump, so wilder jumps than the closed loop can command
    # would not characterize the discretization fidelity that matters.
    angles = rng.uniform(-0.35, 0.35, 2)
    x = np.concatenate([
        rng.uniform(-2, 2, 3),
        rng.uniform(-1, 1, 3),
        angles,
        rng.uniform(-np.pi, np.pi, 1),
    ])
    u = np.array([
        rng.uniform(-0.5, 0.5) * P.mass * P.gravity,
        np.clip(angles[0] + rng.uniform(-0.1, 0.1), -0.35, 0.35),
        np.clip(angles[1] + rng.uniform(-0.1, 0.1), -0.35, 0.35),
        rng.uniform(-1, 1),
    ])
    return x, u


class TestVehicleParams:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            VehicleParams(mass=0.0)

    def test_json_round_trip(self):
        p = VehicleParams(mass=0.05, gravity=9.8, roll_lag=0.2, pitch_lag=0.15)
        assert VehicleParams.from_dict(p.to_dict()) == p


class TestStateInput:
    def test_state_array_round_trip(self, rng):
        x = rng.standard_normal(NX)
        assert np.allclose(QuadrotorState.from_array(x).as_array(), x)

    def test_input_array_round_trip(self):
        u = QuadrotorInput(0.1, 0.2, -0.1, 0.5)
        assert np.allclose(QuadrotorInput.from_array(u.as_array()).as_array(), u.as_array())


class TestContinuousModel:
    def test_hover_fixed_point(self):
        assert np.allclose(f_continuous(np.zeros(NX), np.zeros(NU), P), np.zeros(NX))

    def test_double_thrust_gives_g(self):
        u = np.array([P.mass * P.gravity, 0.0, 0.0, 0.0])
        xdot = f_continuous(np.zeros(NX), u, P)
        expected = np.zeros(NX)
        expected[5] = P.gravity
        assert np.allclose(xdot, expected)

    def test_roll_lag_row(self):
        x = np.zeros(NX)
        x[6] = 0.1
        xdot = f_continuous(x, np.zeros(NU), P)
        assert xdot[6] == pytest.approx(-0.1 / P.roll_lag)


class TestStepRk4:
    def test_hover_invariance(self, rng):
        for delta in rng.uniform(1e-3, 0.1, 20):
            assert np.allclose(step_rk4(np.zeros(NX), np.zeros(NU), P, delta), np.zeros(NX))

    def test_pure_yaw_rate_exact(self):
        u = np.array([0.0, 0.0, 0.0, 1.0])
        x1 = step_rk4(np.zeros(NX), u, P, 0.02)
        assert x1[8] == pytest.approx(0.02, abs=1e-15)

    def test_matches_fine_integration(self, rng):
        for _ in range(100):
            x, u = random_state_input(rng)
            got = step_rk4(x, u, P, 0.02)
            sol = solve_ivp(lambda _, s: f_continuous(s, u, P), (0.0, 0.02), x,
                            method="RK45", rtol=1e-12, atol=1e-12)
            assert np.max(np.abs(got - sol.y[:, -1])) < 1e-6

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            step_rk4(np.zeros(NX), np.zeros(NU), P, 0.0)

    def test_roll_lag_contraction(self):
        # With constant roll command the discrete roll map contracts by
        # exp(-delta/T); the RK4 stability polynomial matches it to 1e-6
        # for delta/T = 0.1.
        delta = 0.01
        cmd = 0.3
        u = np.array([0.0, cmd, 0.0, 0.0])
        x = np.zeros(NX)
        prev_err = cmd
        for _ in range(100):
            x = step_rk4(x, u, P, delta)
            err = cmd - x[6]
            ratio = err / prev_err
            assert ratio == pytest.approx(np.exp(-delta / P.roll_lag), abs=1e-6)
            assert 0 < ratio < 1
            prev_err = err
            x[0:6] = 0.0  # freeze everything except roll
            x[7:9] = 0.0


class TestStepTiming:
    def test_rest_stays_at_rest(self):
        assert np.allclose(step_timing((-1.0, 0.0), 0.0, 0.02), [-1.0, 0.0])

    def test_constant_velocity_advance(self):
        z = step_timing((-1.0, 0.5), 0.0, 0.02)
        assert z[0] == pytest.approx(-0.99)
        assert z[1] == pytest.approx(0.5)

    def test_matches_rk4_on_double_integrator(self, rng):
        # RK4 is exact for this linear system.
        def ode(z, nu):
            return np.array([z[1], nu])

        for _ in range(50):
            z = rng.uniform(-1, 1, 2)
            nu = rng.uniform(-3, 3)
            delta = rng.uniform(1e-3, 0.1)
            k1 = ode(z, nu)
            k2 = ode(z + 0.5 * delta * k1, nu)
            k3 = ode(z + 0.5 * delta * k2, nu)
            k4 = ode(z + delta * k3, nu)
            rk4 = z + delta / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            assert np.max(np.abs(step_timing(z, nu, delta) - rk4)) < 1e-14

    def test_named_tuple_view(self):
        z = PathTimingState(*step_timing((-1.0, 0.1), 0.5, 0.02))
        assert z.s == pytest.approx(-1.0 + 0.002 + 0.0001)
        assert z.s_dot == pytest.approx(0.11)

    def test_timing_matrices_consistent(self, rng):
        a, b = timing_matrices(0.02)
        for _ in range(10):
            z = rng.uniform(-1, 1, 2)
            nu = rng.uniform(-2, 2)
            assert np.allclose(a @ z + b * nu, step_timing(z, nu, 0.02))


class TestOutput:
    def test_zero(self):
        assert np.allclose(output(np.zeros(NX)), np.zeros(4))

    def test_projection(self):
        x = np.zeros(NX)
        x[0:3] = [1.0, 2.0, 3.0]
        x[8] = 0.5
        assert np.allclose(output(x), [1.0, 2.0, 3.0, 0.5])
        assert output(x).shape == (4,)


class TestJacobians:
    def test_finite_difference_agreement(self, rng):
        delta = 0.02
        h = 1e-6
        for _ in range(100):
            x, u = random_state_input(rng)
            a_d, b_d = jacobians(x, u, P, delta)
            fd_a = np.empty_like(a_d)
            for j in range(NX):
                dx = np.zeros(NX)
                dx[j] = h
                fd_a[:, j] = (step_rk4(x + dx, u, P, delta) - step_rk4(x - dx, u, P, delta)) / (2 * h)
            fd_b = np.empty_like(b_d)
            for j in range(NU):
                du = np.zeros(NU)
                du[j] = h
                fd_b[:, j] = (step_rk4(x, u + du, P, delta) - step_rk4(x, u - du, P, delta)) / (2 * h)
            scale_a = np.maximum(np.abs(fd_a), 1.0)
            scale_b = np.maximum(np.abs(fd_b), 1.0)
            assert np.max(np.abs(a_d - fd_a) / scale_a) < 1e-5
            assert np.max(np.abs(b_d - fd_b) / scale_b) < 1e-5

    def test_hover_position_velocity_block(self):
        delta = 0.02
        a_d, _ = jacobians(np.zeros(NX), np.zeros(NU), P, delta)
        assert np.allclose(a_d[0:3, 3:6], delta * np.eye(3), atol=1e-12)

    def test_yaw_input_column(self):
        delta = 0.02
        _, b_d = jacobians(np.zeros(NX), np.zeros(NU), P, delta)
        assert b_d[8, 3] == pytest.approx(delta, abs=1e-15)

    def test_yaw_decoupled_from_other_inputs(self, rng):
        for _ in range(20):
            x, u = random_state_input(rng)
            _, b_d = jacobians(x, u, P, 0.02)
            assert b_d[8, 0] == 0.0
            assert b_d[8, 1] == 0.0
            assert b_d[8, 2] == 0.0
