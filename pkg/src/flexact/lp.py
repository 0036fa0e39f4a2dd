"""Linear programs ``min c.x  s.t.  A_ub x <= b_ub, A_eq x = b_eq, 0 <= x <= upper``.

The default backend is a dense two-phase bounded-variable simplex (pivots
in ``kernels``). A HiGHS backend through scipy is available as a
cross-check and as a drop-in alternative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from flexact import kernels

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


class LPError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LPResult:
    status: str
    x: np.ndarray
    objective: float
    iterations: int
    backend: str

    @property
    def ok(self):
        return self.status == OPTIMAL


def _as_rows(A, b, n):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape != (b.size, n):
        raise LPError(f"constraint shape {A.shape} does not match {b.size} rows x {n} columns")
    return A, b


def _normalise(c, A_ub, b_ub, A_eq, b_eq, upper):
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A_ub, b_ub = _as_rows(A_ub, b_ub, n)
    A_eq, b_eq = _as_rows(A_eq, b_eq, n)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float).ravel()
    if upper.size != n:
        raise LPError("upper bound length mismatch")
    if np.any(upper < 0):
        raise LPError("upper bounds must be non-negative")
    return c, A_ub, b_ub, A_eq, b_eq, upper


class SimplexBackend:
    """Two-phase dense tableau simplex with bounded variables.

    Dantzig pricing with lowest-index ties, Bland's rule after a streak of
    degenerate pivots, lowest-index leaving ties.
    """

    name = "simplex"

    def __init__(self, tol=1e-9, feas_tol=1e-7, bland_after=50, max_pivots=None, use_numba=None):
        self.tol = tol
        self.feas_tol = feas_tol
        self.bland_after = bland_after
        self.max_pivots = max_pivots
        self.use_numba = use_numba

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, upper=None):
        c, A_ub, b_ub, A_eq, b_eq, upper = _normalise(c, A_ub, b_ub, A_eq, b_eq, upper)
        n = c.size
        m_ub, m_eq = b_ub.size, b_eq.size
        m = m_ub + m_eq
        # rows: A_ub x + s = b_ub ; A_eq x = b_eq, flipped so the rhs is >= 0
        A = np.zeros((m, n + m_ub))
        A[:m_ub, :n] = A_ub
        A[:m_ub, n:] = np.eye(m_ub)
        A[m_ub:, :n] = A_eq
        b = np.concatenate([b_ub, b_eq])
        flip = b < 0
        A[flip] *= -1.0
        b = np.where(flip, -b, b)
        basis = np.full(m, -1, dtype=np.int64)
        basis[:m_ub] = np.where(flip[:m_ub], -1, n + np.arange(m_ub))
        # crash: a structural column appearing in a single row with a positive
        # coefficient can start basic in that row
        nnz = np.count_nonzero(A[:, :n], axis=0)
        for j in np.flatnonzero(nnz == 1):
            i = int(np.flatnonzero(A[:, j])[0])
            if basis[i] < 0 and A[i, j] > 0 and b[i] / A[i, j] <= upper[j]:
                b[i] /= A[i, j]
                A[i] /= A[i, j]
                basis[i] = j
        art_rows = np.flatnonzero(basis < 0)
        k = art_rows.size
        ncol = n + m_ub + k
        T = np.zeros((m, ncol))
        T[:, :n + m_ub] = A
        T[art_rows, n + m_ub + np.arange(k)] = 1.0
        basis[art_rows] = n + m_ub + np.arange(k)
        ub = np.concatenate([upper, np.full(m_ub + k, np.inf)])
        is_basic = np.zeros(ncol, dtype=bool)
        is_basic[basis] = True
        at_upper = np.zeros(ncol, dtype=bool)
        beta = b.copy()
        eligible = np.ones(ncol, dtype=bool)
        max_piv = self.max_pivots or 50 * (m + ncol) + 1000
        total = 0
        if k:
            c1 = np.zeros(ncol)
            c1[n + m_ub:] = 1.0
            d = c1 - c1[basis] @ T
            status, piv = kernels.simplex_iterate(T, d, beta, basis, ub, at_upper, is_basic, eligible,
                                                  self.tol, max_piv, self.bland_after,
                                                  use_numba=self.use_numba)
            total += piv
            if status == kernels.ITERATION_LIMIT:
                return LPResult(ITERATION_LIMIT, np.full(n, np.nan), np.nan, total, self.name)
            infeas = float(np.sum(beta[basis >= n + m_ub]))
            if infeas > self.feas_tol * max(1.0, np.abs(b).max(initial=0.0)):
                return LPResult(INFEASIBLE, np.full(n, np.nan), np.nan, total, self.name)
            ub[n + m_ub:] = 0.0
            eligible[n + m_ub:] = False
        c2 = np.concatenate([c, np.zeros(m_ub + k)])
        d = c2 - c2[basis] @ T
        status, piv = kernels.simplex_iterate(T, d, beta, basis, ub, at_upper, is_basic, eligible,
                                              self.tol, max_piv, self.bland_after,
                                              use_numba=self.use_numba)
        total += piv
        if status == kernels.UNBOUNDED:
            return LPResult(UNBOUNDED, np.full(n, np.nan), -np.inf, total, self.name)
        if status == kernels.ITERATION_LIMIT:
            return LPResult(ITERATION_LIMIT, np.full(n, np.nan), np.nan, total, self.name)
        full = np.where(at_upper, ub, 0.0)
        full[basis] = beta
        x = np.clip(full[:n], 0.0, upper)
        return LPResult(OPTIMAL, x, float(c @ x), total, self.name)


class HighsBackend:
    name = "highs"

    def __init__(self, **options):
        self.options = options

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, upper=None):
        from scipy.optimize import linprog

        c, A_ub, b_ub, A_eq, b_eq, upper = _normalise(c, A_ub, b_ub, A_eq, b_eq, upper)
        res = linprog(c, A_ub=A_ub if b_ub.size else None, b_ub=b_ub if b_ub.size else None,
                      A_eq=A_eq if b_eq.size else None, b_eq=b_eq if b_eq.size else None,
                      bounds=[(0.0, None if np.isinf(u) else u) for u in upper],
                      method="highs", options=self.options or None)
        status = {0: OPTIMAL, 1: ITERATION_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, INFEASIBLE)
        if status != OPTIMAL:
            return LPResult(status, np.full(c.size, np.nan), np.nan, int(res.nit), self.name)
        x = np.clip(res.x, 0.0, upper)
        return LPResult(status, x, float(c @ x), int(res.nit), self.name)


BACKENDS = {"simplex": SimplexBackend, "highs": HighsBackend}


def get_backend(name="simplex", **kwargs):
    try:
        return BACKENDS[name](**kwargs)
    except KeyError:
        raise LPError(f"unknown LP backend {name!r}; choose from {sorted(BACKENDS)}") from None


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, upper=None, backend="simplex"):
    solver = get_backend(backend) if isinstance(backend, str) else backend
    return solver.solve(c, A_ub, b_ub, A_eq, b_eq, upper)
