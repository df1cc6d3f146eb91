import json

import numpy as np
import pytest

from capf.geometry import (
    AuxiliaryEllipsoid,
    Classification,
    DegenerateShape,
    Ellipsoid,
    EndpointLambda,
    GeometryError,
    SingularCombination,
    contains,
    dk_dlambda,
    intersects_oracle,
    k_fused,
    k_fused_many,
    k_minkowski,
    minimize_k,
    minimize_k_batch,
    minkowski_outer,
)
from conftest import random_ellipsoid, random_spd_matrix, sphere

DRONE_SHAPE = np.diag([177.78, 177.78, 1975.3])
OBSTACLE_SHAPE = np.array([
    [234.57, -67.42, 0.0],
    [-67.42, 190.76, 0.0],
    [0.0, 0.0, 35.44],
])
OBSTACLE_CENTER = np.array([0.2, 0.16, 0.5])


class TestEllipsoid:
    def test_symmetrized_on_construction(self):
        raw = np.array([[2.0, 0.1, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0]])
        e = Ellipsoid(raw, np.zeros(3))
        assert np.allclose(e.shape, e.shape.T)
        assert e.shape[0, 1] == pytest.approx(0.05)

    def test_rejects_indefinite(self):
        with pytest.raises(GeometryError):
            Ellipsoid(np.diag([1.0, 1.0, -0.5]), np.zeros(3))

    def test_strictly_pd_flag(self):
        assert Ellipsoid(np.eye(3), np.zeros(3)).strictly_pd
        cylinder = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.zeros(3))
        assert not cylinder.strictly_pd

    def test_immutable(self):
        e = sphere(1.0, [0, 0, 0])
        with pytest.raises(ValueError):
            e.shape[0, 0] = 5.0

    def test_json_round_trip(self):
        e = Ellipsoid(OBSTACLE_SHAPE, OBSTACLE_CENTER)
        back = Ellipsoid.from_dict(json.loads(json.dumps(e.to_dict())))
        assert np.array_equal(back.shape, e.shape)
        assert np.array_equal(back.center, e.center)


class TestContains:
    def test_center_contained(self):
        assert contains(sphere(1.0, [0, 0, 0]), [0, 0, 0])

    def test_outside_radius(self):
        assert not contains(sphere(1.0, [0, 0, 0]), [2, 0, 0])

    def test_drone_boundary_band(self):
        # Quadratic form at the 0.075 m semi-axis evaluates to ~1.00001;
        # a 1e-3 band counts it as contained-or-touching.
        drone = Ellipsoid(DRONE_SHAPE, np.zeros(3))
        assert contains(drone, [0.075, 0.0, 0.0], tol=1e-3)
        assert 177.78 * 0.075**2 == pytest.approx(1.0000125)


class TestKFused:
    def test_identical_ellipsoids_give_one(self, rng):
        for _ in range(20):
            e = random_ellipsoid(rng)
            lam = rng.random()
            assert k_fused(lam, e, e).k_value == pytest.approx(1.0, abs=1e-9)

    def test_unit_sphere_closed_form(self, rng):
        # For unit spheres at distance d the certificate is 1 - d^2*lam*(1-lam).
        for _ in range(50):
            d = rng.uniform(0.1, 4.0)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            a = sphere(1.0, np.zeros(3))
            b = sphere(1.0, d * direction)
            lam = rng.uniform(0.0, 1.0)
            expected = 1.0 - d**2 * lam * (1.0 - lam)
            assert k_fused(lam, a, b).k_value == pytest.approx(expected, abs=1e-10)
        assert k_fused(0.5, sphere(1.0, [0, 0, 0]), sphere(1.0, [2.5, 0, 0])).k_value \
            == pytest.approx(1.0 - 2.5**2 / 4.0)

    def test_blend_components(self):
        a = sphere(1.0, [0.0, 0.0, 0.0])
        b = sphere(2.0, [1.0, 0.0, 0.0])
        aux = k_fused(0.3, a, b)
        assert isinstance(aux, AuxiliaryEllipsoid)
        assert np.allclose(aux.e_lambda, 0.3 * a.shape + 0.7 * b.shape)
        expected_m = np.linalg.solve(aux.e_lambda, 0.7 * b.shape @ b.center)
        assert np.allclose(aux.m_lambda, expected_m)

    def test_paper_pair_matches_minkowski(self):
        drone = Ellipsoid(DRONE_SHAPE, [0.0, 0.0, 0.5])
        obstacle = Ellipsoid(OBSTACLE_SHAPE, OBSTACLE_CENTER)
        kf = k_fused(0.5, drone, obstacle).k_value
        km = k_minkowski(0.5, drone, obstacle)
        assert abs(kf - km) <= 1e-9 * (1.0 + abs(km))

    def test_singular_combination_raises(self):
        flat_a = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.zeros(3))
        flat_b = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.ones(3))
        with pytest.raises(SingularCombination):
            k_fused(0.5, flat_a, flat_b)


class TestKMinkowski:
    def test_tangent_spheres_closed_form(self, rng):
        for _ in range(30):
            ra, rb = rng.uniform(0.2, 2.0, 2)
            d = rng.uniform(0.1, 3.0) * (ra + rb)
            a = sphere(ra, np.zeros(3))
            b = sphere(rb, [d, 0.0, 0.0])
            lam = ra / (ra + rb)
            assert k_minkowski(lam, a, b) == pytest.approx(1.0 - d**2 / (ra + rb) ** 2, abs=1e-10)
        # External tangency gives exactly zero.
        a = sphere(1.0, np.zeros(3))
        b = sphere(3.0, [4.0, 0.0, 0.0])
        assert k_minkowski(0.25, a, b) == pytest.approx(0.0, abs=1e-12)

    def test_coincident_centers_give_one(self, rng):
        for _ in range(20):
            c = rng.standard_normal(3)
            a = Ellipsoid(random_spd_matrix(rng), c)
            b = Ellipsoid(random_spd_matrix(rng), c)
            assert k_minkowski(rng.uniform(0.05, 0.95), a, b) == pytest.approx(1.0)

    def test_matches_fused_form(self, rng):
        for _ in range(1000):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            km = k_minkowski(0.37, a, b)
            kf = k_fused(0.37, a, b).k_value
            assert abs(kf - km) <= 1e-9 * (1.0 + abs(km))

    def test_degenerate_shape_rejected(self):
        flat = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.zeros(3))
        ball = sphere(1.0, [3.0, 0.0, 0.0])
        with pytest.raises(DegenerateShape):
            k_minkowski(0.5, flat, ball)

    def test_endpoint_rejected(self):
        a = sphere(1.0, [0, 0, 0])
        b = sphere(1.0, [3, 0, 0])
        with pytest.raises(EndpointLambda):
            k_minkowski(0.0, a, b)
        with pytest.raises(EndpointLambda):
            k_minkowski(1.0, a, b)


class TestDkDlambda:
    def test_equal_spheres_symmetric_at_half(self, rng):
        for d in (0.5, 1.0, 2.0, 3.5):
            a = sphere(1.0, np.zeros(3))
            b = sphere(1.0, [d, 0.0, 0.0])
            assert dk_dlambda(0.5, a, b) == pytest.approx(0.0, abs=1e-12)

    def test_radius_ratio_stationary_point(self):
        a = sphere(1.0, np.zeros(3))
        b = sphere(3.0, [2.0, 0.0, 0.0])
        assert dk_dlambda(0.25, a, b) == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_difference(self, rng):
        h = 1e-6
        for _ in range(200):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            lam = 0.6
            fd = (k_minkowski(lam + h, a, b) - k_minkowski(lam - h, a, b)) / (2 * h)
            an = dk_dlambda(lam, a, b)
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_degenerate_falls_back_to_fd(self):
        flat = Ellipsoid(np.diag([2.0, 3.0, 0.0]), np.array([1.0, 0.5, 0.0]))
        ball = sphere(1.0, np.zeros(3))
        lam = 0.4
        h = 1e-4
        coarse = (k_fused(lam + h, ball, flat).k_value
                  - k_fused(lam - h, ball, flat).k_value) / (2 * h)
        assert dk_dlambda(lam, ball, flat) == pytest.approx(coarse, rel=1e-4, abs=1e-7)


class TestMinimizeK:
    def test_separate_unit_spheres(self):
        v = minimize_k(sphere(1.0, [0, 0, 0]), sphere(1.0, [3, 0, 0]))
        assert v.classification is Classification.SEPARATE
        assert v.k_min == pytest.approx(-1.25, abs=1e-6)
        assert v.lambda_star == pytest.approx(0.5, abs=1e-4)

    def test_overlapping_unit_spheres(self):
        v = minimize_k(sphere(1.0, [0, 0, 0]), sphere(1.0, [1, 0, 0]))
        assert v.classification is Classification.OVERLAPPING
        assert v.k_min == pytest.approx(0.75, abs=1e-6)

    def test_touching_unit_spheres(self):
        v = minimize_k(sphere(1.0, [0, 0, 0]), sphere(1.0, [2, 0, 0]))
        assert v.classification is Classification.TOUCHING
        assert abs(v.k_min) <= 1e-6

    def test_identical_ellipsoids_clamp_low(self, rng):
        e = random_ellipsoid(rng)
        v = minimize_k(e, e)
        assert v.k_min == pytest.approx(1.0)
        assert v.classification is Classification.OVERLAPPING

    def test_sphere_closed_form_sweep(self, rng):
        for _ in range(100):
            ra, rb = rng.uniform(0.2, 2.0, 2)
            d = rng.uniform(0.1, 3.0) * (ra + rb)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            v = minimize_k(sphere(ra, np.zeros(3)), sphere(rb, d * direction))
            assert v.lambda_star == pytest.approx(ra / (ra + rb), abs=1e-4)
            assert v.k_min == pytest.approx(1.0 - d**2 / (ra + rb) ** 2, abs=1e-6)

    def test_double_degenerate_propagates(self):
        flat_a = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.zeros(3))
        flat_b = Ellipsoid(np.diag([1.0, 1.0, 0.0]), np.array([0.1, 0.0, 0.0]))
        with pytest.raises(SingularCombination):
            minimize_k(flat_a, flat_b)


class TestMinkowskiOuter:
    def test_unit_spheres_radius_two(self):
        a = sphere(1.0, np.zeros(3))
        b = sphere(1.0, [5.0, 0.0, 0.0])
        outer = minkowski_outer(0.5, a, b)
        assert np.allclose(outer.shape, np.eye(3) / 4.0)
        assert np.allclose(outer.center, b.center)

    def test_membership_matches_certificate_sign(self, rng):
        # Direct quadratic-form oracle: robot center inside the inflated
        # obstacle exactly when the certificate at that lam is >= 0.
        for _ in range(1000):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            lam = rng.uniform(0.05, 0.95)
            outer = minkowski_outer(lam, a, b)
            diff = a.center - outer.center
            quad = float(diff @ outer.shape @ diff)
            k = k_minkowski(lam, a, b)
            if abs(k) > 1e-12:
                assert (quad > 1.0) == (k < 0.0)


class TestIntersectsOracle:
    def test_identical_true(self, rng):
        e = random_ellipsoid(rng)
        assert intersects_oracle(e, e)

    def test_distant_spheres_false(self):
        assert not intersects_oracle(sphere(1.0, [0, 0, 0]), sphere(1.0, [3, 0, 0]))

    def test_agrees_with_certificate_sign(self, rng):
        checked = 0
        for _ in range(300):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            verdict = minimize_k(a, b)
            if abs(verdict.k_min) <= 1e-3:
                continue
            checked += 1
            assert intersects_oracle(a, b, rng=rng) == (verdict.k_min > 0), \
                f"disagreement at k_min={verdict.k_min}"
        assert checked > 200


class TestProperties:
    def test_swap_symmetry(self, rng):
        for _ in range(200):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            lam = rng.uniform(0.0, 1.0)
            k_ab = k_fused(lam, a, b).k_value
            k_ba = k_fused(1.0 - lam, b, a).k_value
            assert abs(k_ab - k_ba) <= 1e-12 * max(1.0, abs(k_ab))

    def test_convexity_second_differences(self, rng):
        grid = np.linspace(0.0, 1.0, 101)[1:-1]
        for _ in range(50):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            k = np.array([k_fused(l, a, b).k_value for l in grid])
            second = k[:-2] - 2 * k[1:-1] + k[2:]
            bound = -1e-8 * (1.0 + np.abs(k[1:-1]))
            assert np.all(second >= bound)

    def test_containment_property(self, rng):
        # Sampled-point version: every point of A cap B lies in the blend,
        # and every point of the blend lies in A cup B.
        for _ in range(30):
            a = random_ellipsoid(rng)
            b = random_ellipsoid(rng)
            pts = _sample_in_union(rng, a, b, 4000)
            qa = _quad_form(a, pts)
            qb = _quad_form(b, pts)
            in_both = (qa <= 1.0) & (qb <= 1.0)
            for lam in rng.uniform(0.0, 1.0, 10):
                aux = k_fused(lam, a, b)
                d = pts - aux.m_lambda
                q_lam = np.einsum("ij,jk,ik->i", d, aux.e_lambda, d)
                if aux.k_value < 0.0:
                    assert not in_both.any()
                else:
                    assert np.all(q_lam[in_both] <= aux.k_value * (1 + 1e-10) + 1e-10)
                in_blend = q_lam <= aux.k_value
                assert np.all((qa[in_blend] <= 1.0 + 1e-10) | (qb[in_blend] <= 1.0 + 1e-10))

    def test_degenerate_cylinder_matches_projection_oracle(self, rng):
        # Infinite z-aligned cylinder: verdict must match the 2-D problem
        # between the robot's xy shadow and the cylinder cross-section.
        for _ in range(40):
            a = random_ellipsoid(rng)
            b2 = random_spd_matrix(rng, dim=2, eig_low=0.5, eig_high=20.0)
            shape_b = np.zeros((3, 3))
            shape_b[:2, :2] = b2
            wb = rng.uniform(-2.0, 2.0, 3)
            cylinder = Ellipsoid(shape_b, wb)

            for lam in (0.3, 0.7, 1.0):
                assert np.isfinite(k_fused(lam, a, cylinder).k_value)

            verdict = minimize_k(a, cylinder)
            if abs(verdict.k_min) <= 1e-3:
                continue
            shadow = _xy_shadow(a)
            cross = Ellipsoid(b2, wb[:2])
            expected = intersects_oracle(shadow, cross, rng=rng)
            assert (verdict.k_min > 0) == expected


class TestBatchHelpers:
    def test_k_fused_many_matches_scalar(self, rng):
        shape_a = random_spd_matrix(rng)
        shape_b = random_spd_matrix(rng)
        lams = rng.uniform(0.01, 0.99, 15)
        ca = rng.uniform(-2, 2, (15, 3))
        cb = rng.uniform(-2, 2, (15, 3))
        ks, grads = k_fused_many(lams, shape_a, ca, shape_b, cb)
        for i in range(15):
            a = Ellipsoid(shape_a, ca[i])
            b = Ellipsoid(shape_b, cb[i])
            assert ks[i] == pytest.approx(k_fused(lams[i], a, b).k_value, abs=1e-11)
            h = 1e-7
            for j in range(3):
                cp = ca[i].copy()
                cp[j] += h
                cm = ca[i].copy()
                cm[j] -= h
                fd = (k_fused(lams[i], Ellipsoid(shape_a, cp), b).k_value
                      - k_fused(lams[i], Ellipsoid(shape_a, cm), b).k_value) / (2 * h)
                assert grads[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-6)

    def test_minimize_k_batch_matches_scalar(self, rng):
        shape_a = random_spd_matrix(rng)
        shape_b = random_spd_matrix(rng)
        ca = rng.uniform(-2, 2, (40, 3))
        cb = rng.uniform(-2, 2, (40, 3))
        lam_b, k_b = minimize_k_batch(shape_a, ca, shape_b, cb)
        for i in range(40):
            v = minimize_k(Ellipsoid(shape_a, ca[i]), Ellipsoid(shape_b, cb[i]))
            assert lam_b[i] == pytest.approx(v.lambda_star, abs=2e-4)
            assert k_b[i] == pytest.approx(v.k_min, abs=1e-8)


def _quad_form(e, pts):
    d = pts - e.center
    return np.einsum("ij,jk,ik->i", d, e.shape, d)


def _sample_in_union(rng, a, b, count):
    pts = []
    for e in (a, b):
        z = rng.standard_normal((count // 2, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= rng.random((count // 2, 1)) ** (1 / 3)
        chol = np.linalg.cholesky(e.shape)
        pts.append(e.center + z @ np.linalg.inv(chol))
    return np.vstack(pts)


def _xy_shadow(e):
    # Schur complement of the z-block gives the xy projection's shape.
    s = e.shape
    shadow = s[:2, :2] - np.outer(s[:2, 2], s[2, :2]) / s[2, 2]
    return Ellipsoid(shadow, e.center[:2])
