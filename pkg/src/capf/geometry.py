"""Ellipsoidal overlap testing via a convex scalar certificate.

Two ellipsoids are disjoint exactly when the certificate value K(lam) is
negative for some lam in [0, 1].  K is convex in lam, so the strongest
certificate is found by bisecting on the sign of dK/dlam.  For strictly
positive-definite shapes the certificate has an equivalent form built on
an ellipsoidal outer approximation of the Minkowski sum; a projected
gradient-descent intersection oracle is provided for cross-checking and
never touches any K code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class GeometryError(ValueError):
    pass


class SingularCombination(GeometryError):
    """The blended shape matrix is numerically singular."""


class DegenerateShape(GeometryError):
    """Operation requires strictly positive-definite shapes."""


class EndpointLambda(GeometryError):
    """Operation undefined at lam = 0 or lam = 1."""


# Relative eigenvalue floor below which a shape counts as degenerate.
_PD_REL_TOL = 1e-10
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class Ellipsoid:
    """Set {x : (x - center)^T shape (x - center) <= 1}.

    The shape matrix is symmetrized on construction and must be positive
    semi-definite; rank-deficient shapes (e.g. infinite cylinders) are
    accepted and flagged via ``strictly_pd``.
    """

    shape: np.ndarray
    center: np.ndarray
    strictly_pd: bool = field(init=False)

    def __post_init__(self):
        shape = np.asarray(self.shape, dtype=float)
        center = np.asarray(self.center, dtype=float).ravel()
        if shape.ndim != 2 or shape.shape[0] != shape.shape[1]:
            raise GeometryError(f"shape matrix must be square, got {shape.shape}")
        if center.shape[0] != shape.shape[0]:
            raise GeometryError("center dimension does not match shape matrix")
        shape = 0.5 * (shape + shape.T)
        eigs = np.linalg.eigvalsh(shape)
        floor = _PD_REL_TOL * max(np.trace(shape), 0.0)
        if eigs[0] < -floor:
            raise GeometryError(f"shape matrix is not positive semi-definite (min eig {eigs[0]:.3e})")
        shape.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "strictly_pd", bool(eigs[0] > floor))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def to_dict(self) -> dict:
        return {"shape": self.shape.tolist(), "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Ellipsoid":
        return cls(np.array(data["shape"], dtype=float), np.array(data["center"], dtype=float))


@dataclass(frozen=True)
class AuxiliaryEllipsoid:
    """Blended ellipsoid lam*A + (1-lam)*B with its certificate value."""

    e_lambda: np.ndarray
    m_lambda: np.ndarray
    k_value: float


class Classification(Enum):
    SEPARATE = "Separate"
    TOUCHING = "Touching"
    OVERLAPPING = "Overlapping"


@dataclass(frozen=True)
class OverlapVerdict:
    classification: Classification
    k_min: float
    lambda_star: float


def contains(e: Ellipsoid, x, tol: float = 1e-9) -> bool:
    """True iff x lies in the ellipsoid, with a boundary band of width tol."""
    d = np.asarray(x, dtype=float) - e.center
    return float(d @ e.shape @ d) <= 1.0 + tol


def k_fused(lam: float, a: Ellipsoid, b: Ellipsoid) -> AuxiliaryEllipsoid:
    """Certificate via the blended quadratic form, valid for PSD shapes.

    Returns the blended shape E = lam*A + (1-lam)*B, its center m, and
    K = 1 - lam v'Av - (1-lam) w'Bw + m'Em.  Raises SingularCombination
    when E is numerically singular (degenerate shape at an excluded
    endpoint).
    """
    if not 0.0 <= lam <= 1.0:
        raise GeometryError(f"lam must be in [0, 1], got {lam}")
    e_lam = lam * a.shape + (1.0 - lam) * b.shape
    eigs = np.linalg.eigvalsh(e_lam)
    if eigs[0] <= 0.0 or eigs[-1] >= _COND_LIMIT * eigs[0]:
        raise SingularCombination(f"blended shape singular at lam={lam}")
    rhs = lam * (a.shape @ a.center) + (1.0 - lam) * (b.shape @ b.center)
    m_lam = np.linalg.solve(e_lam, rhs)
    k = (1.0
         - lam * float(a.center @ a.shape @ a.center)
         - (1.0 - lam) * float(b.center @ b.shape @ b.center)
         + float(m_lam @ e_lam @ m_lam))
    return AuxiliaryEllipsoid(e_lam, m_lam, k)


def _require_pd_interior(lam, a, b):
    if not (a.strictly_pd and b.strictly_pd):
        raise DegenerateShape("both shapes must be strictly positive definite")
    if lam <= 0.0 or lam >= 1.0:
        raise EndpointLambda(f"lam must be strictly inside (0, 1), got {lam}")


def _sum_inverse(lam, a, b):
    # B^-1/(1-lam) + A^-1/lam, the shape of the inflated-obstacle ellipsoid.
    return (np.linalg.inv(b.shape) / (1.0 - lam)
            + np.linalg.inv(a.shape) / lam)


def k_minkowski(lam: float, a: Ellipsoid, b: Ellipsoid) -> float:
    """Certificate via the Minkowski-sum outer approximation (PD shapes only)."""
    _require_pd_interior(lam, a, b)
    eta = b.center - a.center
    s = _sum_inverse(lam, a, b)
    return 1.0 - float(eta @ np.linalg.solve(s, eta))


def dk_dlambda(lam: float, a: Ellipsoid, b: Ellipsoid) -> float:
    """Derivative of the certificate in lam.

    Analytic for strictly PD pairs; central finite differences of the
    fused form (step 1e-6) when either shape is degenerate.
    """
    if a.strictly_pd and b.strictly_pd:
        if lam <= 0.0 or lam >= 1.0:
            raise EndpointLambda(f"lam must be strictly inside (0, 1), got {lam}")
        eta = b.center - a.center
        s = _sum_inverse(lam, a, b)
        y = np.linalg.solve(s, eta)
        inner = (np.linalg.inv(b.shape) / (1.0 - lam) ** 2
                 - np.linalg.inv(a.shape) / lam ** 2)
        return float(y @ inner @ y)
    h = 1e-6
    lo = max(lam - h, 0.0)
    hi = min(lam + h, 1.0)
    return (k_fused(hi, a, b).k_value - k_fused(lo, a, b).k_value) / (hi - lo)


def minimize_k(a: Ellipsoid, b: Ellipsoid, lambda_tol: float = 1e-4,
               touch_tol: float = 1e-6) -> OverlapVerdict:
    """Minimize the certificate over lam in [0, 1] by derivative bisection.

    The search interval shrinks away from an endpoint whose blended shape
    would be singular (degenerate shape of the matching input).  The
    classification compares the minimum against ``touch_tol``.
    """
    if lambda_tol <= 0.0:
        raise GeometryError("lambda_tol must be positive")
    lo = 0.0 if b.strictly_pd else lambda_tol
    hi = 1.0 if a.strictly_pd else 1.0 - lambda_tol

    left = max(lo, lambda_tol)
    right = min(hi, 1.0 - lambda_tol)
    g_left = dk_dlambda(left, a, b)
    if g_left >= 0.0:
        lam_star = lo
    else:
        g_right = dk_dlambda(right, a, b)
        if g_right <= 0.0:
            lam_star = hi
        else:
            while right - left > lambda_tol:
                mid = 0.5 * (left + right)
                if dk_dlambda(mid, a, b) < 0.0:
                    left = mid
                else:
                    right = mid
            lam_star = 0.5 * (left + right)

    k_min = k_fused(lam_star, a, b).k_value
    if k_min < -touch_tol:
        cls = Classification.SEPARATE
    elif k_min > touch_tol:
        cls = Classification.OVERLAPPING
    else:
        cls = Classification.TOUCHING
    return OverlapVerdict(cls, k_min, lam_star)


def minkowski_outer(lam: float, a: Ellipsoid, b: Ellipsoid) -> Ellipsoid:
    """Outer approximation of the Minkowski sum, centered on b.

    The returned ellipsoid is the obstacle b inflated by the robot a:
    the robot center lies inside it exactly when the certificate at this
    lam is nonnegative.
    """
    _require_pd_interior(lam, a, b)
    shape = np.linalg.inv(_sum_inverse(lam, a, b))
    return Ellipsoid(shape, b.center)


def intersects_oracle(a: Ellipsoid, b: Ellipsoid, restarts: int = 20,
                      rng: np.random.Generator | None = None,
                      max_iter: int = 2000) -> bool:
    """Decide intersection without any certificate machinery.

    Minimizes (x-w)'B(x-w) over the (whitened) unit ball of a by projected
    gradient descent from ``restarts`` random starts; the sets intersect
    iff the minimum is <= 1 + 1e-9.  Best-effort oracle for tests.
    """
    if not (a.strictly_pd and b.strictly_pd):
        raise DegenerateShape("oracle requires strictly PD shapes")
    if rng is None:
        rng = np.random.default_rng(0)
    n = a.dim

    # Whiten a: x = v + M z maps the unit ball |z| <= 1 onto a's set.
    chol = np.linalg.cholesky(a.shape)
    m = np.linalg.inv(chol.T)
    hess = m.T @ b.shape @ m
    c = a.center - b.center
    lin = m.T @ (b.shape @ c)
    const = float(c @ b.shape @ c)
    step = 1.0 / (2.0 * np.linalg.eigvalsh(hess)[-1])

    pts = rng.standard_normal((restarts, n))
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    radii = rng.random((restarts, 1)) ** (1.0 / n)
    pts = pts / np.maximum(norms, 1e-300) * radii
    pts[0] = 0.0
    # Unconstrained minimizer, projected; usually already optimal.
    free = np.linalg.solve(hess, -lin)
    pts[1 % restarts] = free / max(1.0, np.linalg.norm(free))

    for _ in range(max_iter):
        grad = 2.0 * (pts @ hess + lin)
        new = pts - step * grad
        nrm = np.linalg.norm(new, axis=1, keepdims=True)
        new = new / np.maximum(nrm, 1.0)
        if np.max(np.abs(new - pts)) < 1e-13:
            pts = new
            break
        pts = new

    vals = np.einsum("ij,jk,ik->i", pts, hess, pts) + 2.0 * pts @ lin + const
    return float(vals.min()) <= 1.0 + 1e-9


def k_fused_many(lams: np.ndarray, shape_a: np.ndarray, centers_a: np.ndarray,
                 shape_b: np.ndarray, centers_b: np.ndarray):
    """Batched fused-form certificate and its gradient in the a-centers.

    Evaluates K(lam_i) for ellipsoid pairs sharing the two shape matrices
    but with per-instance centers, and returns (k (M,), dK/dv (M, 3)).
    Used on the controller hot path, where the robot shape is fixed and
    the center is the decision-relevant quantity.
    """
    lams = np.asarray(lams, dtype=float)
    centers_a = np.atleast_2d(np.asarray(centers_a, dtype=float))
    centers_b = np.atleast_2d(np.asarray(centers_b, dtype=float))
    m = lams.shape[0]
    lam_col = lams[:, None, None]
    e = lam_col * shape_a + (1.0 - lam_col) * shape_b
    av = centers_a @ shape_a.T
    bw = centers_b @ shape_b.T
    rhs = lams[:, None] * av + (1.0 - lams[:, None]) * bw
    m_lam = np.linalg.solve(e, rhs[..., None])[..., 0]
    vav = np.einsum("ij,ij->i", centers_a, av)
    wbw = np.einsum("ij,ij->i", centers_b, bw)
    mem = np.einsum("ij,ijk,ik->i", m_lam, e, m_lam)
    k = 1.0 - lams * vav - (1.0 - lams) * wbw + mem
    grad_v = 2.0 * lams[:, None] * (m_lam - centers_a) @ shape_a.T
    return k, grad_v


class _PairBasis:
    """Simultaneous diagonalization of a strictly PD shape pair.

    Caches the congruence that turns both shapes diagonal so that K and
    dK/dlam reduce to O(n) expressions per lam; used for vectorized
    certificate minimization over many center pairs.
    """

    def __init__(self, shape_a: np.ndarray, shape_b: np.ndarray):
        import scipy.linalg

        # V' A V = I, V' B V = diag(d)
        d, v = scipy.linalg.eigh(shape_b, shape_a)
        self.d = np.maximum(d, 1e-300)
        self.v_inv = v.T @ shape_a  # V^-1

    def project(self, etas: np.ndarray) -> np.ndarray:
        return etas @ self.v_inv.T

    def k_of(self, lams: np.ndarray, q: np.ndarray) -> np.ndarray:
        denom = 1.0 / lams[:, None] + 1.0 / (self.d[None, :] * (1.0 - lams[:, None]))
        return 1.0 - np.sum(q * q / denom, axis=1)

    def dk_of(self, lams: np.ndarray, q: np.ndarray) -> np.ndarray:
        lam = lams[:, None]
        denom = 1.0 / lam + 1.0 / (self.d[None, :] * (1.0 - lam))
        num = 1.0 / (self.d[None, :] * (1.0 - lam) ** 2) - 1.0 / lam ** 2
        return np.sum(q * q * num / denom ** 2, axis=1)


def minimize_k_batch(shape_a: np.ndarray, centers_a: np.ndarray,
                     shape_b: np.ndarray, centers_b: np.ndarray,
                     lambda_tol: float = 1e-4,
                     basis: _PairBasis | None = None):
    """Vectorized certificate minimization for a fixed strictly-PD pair
    of shapes and many center pairs.  Returns (lambda_star (M,), k_min (M,)).

    Matches minimize_k's bisection semantics (same clamp rules, same
    interval tolerance) but runs all instances in lock-step.
    """
    centers_a = np.atleast_2d(centers_a)
    centers_b = np.atleast_2d(centers_b)
    if basis is None:
        basis = _PairBasis(shape_a, shape_b)
    q = basis.project(centers_b - centers_a)
    m = q.shape[0]

    left = np.full(m, lambda_tol)
    right = np.full(m, 1.0 - lambda_tol)
    lam_star = np.empty(m)

    g_left = basis.dk_of(left, q)
    g_right = basis.dk_of(right, q)
    at_lo = g_left >= 0.0
    at_hi = (~at_lo) & (g_right <= 0.0)
    interior = ~(at_lo | at_hi)
    lam_star[at_lo] = 0.0
    lam_star[at_hi] = 1.0

    lo = left[interior]
    hi = right[interior]
    qi = q[interior]
    while lo.size and np.max(hi - lo) > lambda_tol:
        mid = 0.5 * (lo + hi)
        neg = basis.dk_of(mid, qi) < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    lam_star[interior] = 0.5 * (lo + hi)

    # Endpoint K values equal 1 by construction; interior via diagonal form.
    k_min = np.ones(m)
    inner_mask = (lam_star > 0.0) & (lam_star < 1.0)
    k_min[inner_mask] = basis.k_of(lam_star[inner_mask], q[inner_mask])
    return lam_star, k_min
