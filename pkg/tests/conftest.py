import numpy as np
import pytest

from capf.geometry import Ellipsoid


def random_spd_matrix(rng, dim=3, eig_low=0.5, eig_high=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = np.exp(rng.uniform(np.log(eig_low), np.log(eig_high), size=dim))
    return q @ np.diag(eigs) @ q.T


def random_ellipsoid(rng, dim=3, center_span=2.0):
    return Ellipsoid(random_spd_matrix(rng, dim), rng.uniform(-center_span, center_span, dim))


def sphere(radius, center):
    center = np.asarray(center, dtype=float)
    return Ellipsoid(np.eye(center.shape[0]) / radius**2, center)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
