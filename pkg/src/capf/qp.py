"""Dense primal active-set solver for strictly convex inequality QPs.

Solves  min 1/2 x'Qx + c'x  subject to  Gx <= h  from a feasible start,
optionally warm-started with the working set of a previous solve.  Q is
factorized once per solve; each active-set iteration then works on the
Schur complement of the active rows, so adding or dropping a row costs
O(n^2) instead of a fresh dense KKT factorization.  Warm starting across
successive MPC steps is the main speed lever: in steady state the
working set barely changes and most solves finish in a couple of
iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg


class QpStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE_START = "infeasible_start"


@dataclass
class QpResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of G, zero when inactive
    status: QpStatus
    working_set: tuple
    iterations: int


_FEAS_TOL = 1e-8
_DUAL_TOL = 1e-9
_STEP_TOL = 1e-11


class _ActiveSet:
    """Working set with cached Q^{-1} G_W' columns and Schur complement."""

    def __init__(self, chol, n, capacity):
        self.chol = chol
        self.rows: list[int] = []
        self.y = np.empty((n, capacity))      # Q^{-1} g_i columns
        self.g_rows = np.empty((capacity, n))
        self.schur = np.empty((capacity, capacity))

    @property
    def size(self):
        return len(self.rows)

    def add(self, idx, g_row):
        w = self.size
        y_new = scipy.linalg.cho_solve(self.chol, g_row, check_finite=False)
        self.y[:, w] = y_new
        self.g_rows[w] = g_row
        if w:
            cross = self.g_rows[:w] @ y_new
            self.schur[:w, w] = cross
            self.schur[w, :w] = cross
        self.schur[w, w] = float(g_row @ y_new)
        self.rows.append(idx)

    def add_batch(self, indices, g_rows):
        """Populate the working set in one shot (warm-start path)."""
        w = len(indices)
        if w == 0:
            return
        y_block = scipy.linalg.cho_solve(self.chol, g_rows.T, check_finite=False)
        self.y[:, :w] = y_block
        self.g_rows[:w] = g_rows
        self.schur[:w, :w] = g_rows @ y_block
        self.rows = list(indices)

    def drop(self, pos):
        w = self.size
        keep = [i for i in range(w) if i != pos]
        self.y[:, :w - 1] = self.y[:, keep]
        self.g_rows[:w - 1] = self.g_rows[keep]
        self.schur[:w - 1, :w - 1] = self.schur[np.ix_(keep, keep)]
        del self.rows[pos]

    def solve_eqp(self, x, qinv_c, h_vec):
        """Direction to the EQP optimum and its multipliers.

        Solves Q(x+p) + c + G_W' mu = 0 with G_W (x+p) = h_W, which
        self-corrects accumulated drift off the active faces.
        """
        w = self.size
        if w == 0:
            return -qinv_c - x, np.zeros(0)
        h_act = h_vec[self.rows]
        rhs = -(h_act + self.g_rows[:w] @ qinv_c)
        try:
            mu = np.linalg.solve(self.schur[:w, :w], rhs)
        except np.linalg.LinAlgError:
            mu = np.linalg.lstsq(self.schur[:w, :w], rhs, rcond=None)[0]
        p = -qinv_c - self.y[:, :w] @ mu - x
        return p, mu


def solve_qp(q_mat, c_vec, g_mat, h_vec, x0, working_set=(), max_iter=None) -> QpResult:
    """Primal active-set iteration from the feasible point x0.

    q_mat must be symmetric positive definite.  working_set rows not
    active at x0 are silently discarded.
    """
    q_mat = np.asarray(q_mat, dtype=float)
    c_vec = np.asarray(c_vec, dtype=float)
    g_mat = np.asarray(g_mat, dtype=float)
    h_vec = np.asarray(h_vec, dtype=float)
    x = np.array(x0, dtype=float)
    n = x.shape[0]
    m = g_mat.shape[0] if g_mat.size else 0
    if max_iter is None:
        max_iter = 50 + 10 * (n + m)

    chol = scipy.linalg.cho_factor(q_mat, lower=True, check_finite=False)
    qinv_c = scipy.linalg.cho_solve(chol, c_vec)

    if m == 0:
        return QpResult(-qinv_c, np.zeros(0), QpStatus.OPTIMAL, (), 1)

    resid = h_vec - g_mat @ x
    scale = 1.0 + np.abs(h_vec)
    if np.min(resid / scale) < -_FEAS_TOL:
        return QpResult(x, np.zeros(m), QpStatus.INFEASIBLE_START, (), 0)

    active = _ActiveSet(chol, n, min(m, n) + 1)
    init_rows = [i for i in dict.fromkeys(working_set)
                 if 0 <= i < m and abs(resid[i]) <= 1e-6 * scale[i]][:n - 1]
    active.add_batch(init_rows, g_mat[init_rows])

    mult = np.zeros(m)
    iterations = 0
    mu = np.zeros(0)
    while iterations < max_iter:
        iterations += 1
        p, mu = active.solve_eqp(x, qinv_c, h_vec)

        if np.max(np.abs(p)) < _STEP_TOL * (1.0 + np.max(np.abs(x))):
            if active.size == 0 or np.min(mu) >= -_DUAL_TOL:
                mult[:] = 0.0
                if active.size:
                    mult[active.rows] = np.maximum(mu, 0.0)
                return QpResult(x, mult, QpStatus.OPTIMAL, tuple(active.rows), iterations)
            active.drop(int(np.argmin(mu)))
            continue

        # Longest feasible step along p.
        gp = g_mat @ p
        resid = h_vec - g_mat @ x
        is_active = np.zeros(m, dtype=bool)
        is_active[active.rows] = True
        candidates = (~is_active) & (gp > 1e-13)
        alpha = 1.0
        blocker = -1
        if candidates.any():
            ratios = np.where(candidates, np.maximum(resid, 0.0) / np.where(candidates, gp, 1.0), np.inf)
            i_min = int(np.argmin(ratios))
            if ratios[i_min] < alpha - 1e-15:
                alpha = float(ratios[i_min])
                blocker = i_min
        x = x + alpha * p
        if blocker >= 0:
            if active.size >= n:
                # Degenerate vertex: make room before adding the blocker.
                active.drop(int(np.argmin(mu)) if mu.size else 0)
            active.add(blocker, g_mat[blocker])

    mult[:] = 0.0
    if active.size and mu.size == active.size:
        mult[active.rows] = np.maximum(mu, 0.0)
    return QpResult(x, mult, QpStatus.MAX_ITER, tuple(active.rows), iterations)
