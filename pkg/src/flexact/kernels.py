"""Hot numeric kernels.

Two kernels dominate runtime: the backward/forward sweep used by every power
flow (and there are hundreds per run through perturb-and-observe and the
successive LP), and the pivoting loop of the dense simplex.

Each kernel exists as a numba-compiled function and a plain numpy function.
``sweep`` and ``simplex_iterate`` dispatch on ``_accel.NUMBA_ENABLED``; the
explicit variants are exported for tests and ``benchmarks/``.
"""

import numpy as np

from flexact import _accel

# status codes shared with flexact.lp
OPTIMAL = 0
UNBOUNDED = 1
ITERATION_LIMIT = 2


def _sweep_loops(order, parent, upstream, z, s_load, v_slack, tol, max_iter):
    n_bus = s_load.shape[1]
    n_br = z.shape[0]
    v = np.empty((3, n_bus), dtype=np.complex128)
    for k in range(n_bus):
        for p in range(3):
            v[p, k] = v_slack[p]
    j = np.zeros((3, n_br), dtype=np.complex128)
    i_node = np.zeros((3, n_bus), dtype=np.complex128)
    acc = np.zeros((3, n_bus), dtype=np.complex128)
    mismatch = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for k in range(n_bus):
            for p in range(3):
                vk = v[p, k]
                if vk != 0.0:
                    i_node[p, k] = np.conj(s_load[p, k] / vk)
                else:
                    i_node[p, k] = 0.0
                acc[p, k] = i_node[p, k]
        # backward: accumulate downstream currents into each parent branch
        for idx in range(n_bus - 1, 0, -1):
            k = order[idx]
            b = parent[k]
            u = upstream[b]
            for p in range(3):
                j[p, b] = acc[p, k]
                acc[p, u] += acc[p, k]
        # forward: coupled 3x3 drop along each branch
        for idx in range(1, n_bus):
            k = order[idx]
            b = parent[k]
            u = upstream[b]
            for p in range(3):
                drop = 0.0 + 0.0j
                for q in range(3):
                    drop += z[b, p, q] * j[q, b]
                v[p, k] = v[p, u] - drop
        mismatch = 0.0
        for idx in range(1, n_bus):
            k = order[idx]
            for p in range(3):
                m = abs(v[p, k] * np.conj(i_node[p, k]) - s_load[p, k])
                if not m <= mismatch:
                    mismatch = m
        if mismatch < tol or not np.isfinite(mismatch) or mismatch > 1e6:
            break
    return v, j, it, mismatch


def sweep_numpy(path, z, s_load, v_slack, tol, max_iter):
    """Backward/forward sweep written with the bus-to-branch path matrix.

    ``path[n, b]`` is 1 when branch ``b`` lies on the route from the slack bus
    to bus ``n``. Branch currents are then ``I_node @ path`` and bus voltages
    ``v_slack - (Z J) @ path.T``.
    """
    n_bus = s_load.shape[1]
    v = np.repeat(v_slack[:, None], n_bus, axis=1).astype(np.complex128)
    j = np.zeros((3, z.shape[0]), dtype=np.complex128)
    nonslack = path.any(axis=1)
    mismatch = np.inf
    it = 0
    while it < max_iter:
        it += 1
        with np.errstate(divide="ignore", invalid="ignore"):
            i_node = np.where(v != 0, np.conj(s_load / v), 0.0)
        j = i_node @ path
        drop = np.einsum("bpq,qb->pb", z, j)
        v = v_slack[:, None] - drop @ path.T
        err = np.abs(v * np.conj(i_node) - s_load)[:, nonslack]
        mismatch = float(err.max()) if err.size else 0.0
        if mismatch < tol or not np.isfinite(mismatch) or mismatch > 1e6:
            break
    return v, j, it, mismatch


sweep_numba = _accel.njit(_sweep_loops)


def sweep(topology, z, s_load, v_slack, tol, max_iter, use_numba=None):
    """Run one radial power flow; returns ``(V, J, iterations, mismatch)``.

    ``topology`` is a ``netmodel.Topology``; ``s_load`` is the (3, n_bus)
    complex per-unit load (consumption positive).
    """
    if use_numba is None:
        use_numba = _accel.NUMBA_ENABLED
    if use_numba:
        return sweep_numba(topology.order, topology.parent, topology.upstream,
                           z, s_load, v_slack, float(tol), int(max_iter))
    return sweep_numpy(topology.path, z, s_load, v_slack, float(tol), int(max_iter))


def _simplex_iterate(T, d, beta, basis, upper, at_upper, is_basic, eligible,
                     tol, max_pivots, bland_after):
    """Bounded-variable primal simplex pivots on a dense tableau, in place.

    ``T`` holds B^-1 A, ``d`` the reduced costs, ``beta`` the basic values.
    Nonbasic variables sit at 0 or at ``upper`` (``at_upper``). Entering
    variable: most negative improvement (Dantzig) with lowest-index ties,
    switching to Bland's rule after ``bland_after`` consecutive degenerate
    pivots. Leaving ties go to the lowest variable index.
    """
    m, ncol = T.shape
    streak = 0
    n_piv = 0
    while n_piv < max_pivots:
        score = np.where(at_upper, d, -d)
        ok = eligible & (~is_basic) & (upper > tol) & (score > tol)
        if not ok.any():
            return OPTIMAL, n_piv
        if streak >= bland_after:
            q = int(np.argmax(ok))
        else:
            q = int(np.argmax(np.where(ok, score, 0.0)))
        delta = -1.0 if at_upper[q] else 1.0
        col = delta * T[:, q]
        ub = upper[basis]
        t = np.full(m, np.inf)
        dec = col > tol
        inc = (col < -tol) & np.isfinite(ub)
        t[dec] = np.maximum(beta[dec], 0.0) / col[dec]
        t[inc] = np.maximum(ub[inc] - beta[inc], 0.0) / (-col[inc])
        t_row = t.min() if m > 0 else np.inf
        t_flip = upper[q]
        if not np.isfinite(t_row) and not np.isfinite(t_flip):
            return UNBOUNDED, n_piv
        n_piv += 1
        if t_flip <= t_row:
            beta -= t_flip * col
            at_upper[q] = not at_upper[q]
            streak = 0
            continue
        cand = t <= t_row + 1e-12
        r = -1
        best = ncol
        for i in range(m):
            if cand[i] and basis[i] < best:
                best = basis[i]
                r = i
        leaving = basis[r]
        to_upper = inc[r]
        beta -= t_row * col
        beta[r] = t_row if delta > 0 else upper[q] - t_row
        prow = T[r, :] / T[r, q]
        pcol = T[:, q].copy()
        pcol[r] = 0.0
        T -= np.outer(pcol, prow)
        T[r, :] = prow
        d -= d[q] * prow
        basis[r] = q
        is_basic[q] = True
        at_upper[q] = False
        is_basic[leaving] = False
        at_upper[leaving] = to_upper
        streak = streak + 1 if t_row <= tol else 0
    return ITERATION_LIMIT, n_piv


def _simplex_loops(T, d, beta, basis, upper, at_upper, is_basic, eligible,
                   tol, max_pivots, bland_after):
    """Same pivoting rules as ``_simplex_iterate`` with explicit loops, so the
    compiled version does not allocate per pivot."""
    m, ncol = T.shape
    streak = 0
    n_piv = 0
    col = np.empty(m)
    prow = np.empty(ncol)
    while n_piv < max_pivots:
        q = -1
        best_score = 0.0
        for j in range(ncol):
            if not eligible[j] or is_basic[j] or upper[j] <= tol:
                continue
            sc = d[j] if at_upper[j] else -d[j]
            if sc > tol:
                if streak >= bland_after:
                    q = j
                    break
                if sc > best_score:
                    best_score = sc
                    q = j
        if q < 0:
            return OPTIMAL, n_piv
        delta = -1.0 if at_upper[q] else 1.0
        t_row = np.inf
        for i in range(m):
            col[i] = delta * T[i, q]
        for i in range(m):
            ci = col[i]
            if ci > tol:
                ti = max(beta[i], 0.0) / ci
            elif ci < -tol and np.isfinite(upper[basis[i]]):
                ti = max(upper[basis[i]] - beta[i], 0.0) / (-ci)
            else:
                continue
            if ti < t_row:
                t_row = ti
        t_flip = upper[q]
        if not np.isfinite(t_row) and not np.isfinite(t_flip):
            return UNBOUNDED, n_piv
        n_piv += 1
        if t_flip <= t_row:
            for i in range(m):
                beta[i] -= t_flip * col[i]
            at_upper[q] = not at_upper[q]
            streak = 0
            continue
        r = -1
        best = ncol
        to_upper = False
        for i in range(m):
            ci = col[i]
            if ci > tol:
                ti = max(beta[i], 0.0) / ci
                up = False
            elif ci < -tol and np.isfinite(upper[basis[i]]):
                ti = max(upper[basis[i]] - beta[i], 0.0) / (-ci)
                up = True
            else:
                continue
            if ti <= t_row + 1e-12 and basis[i] < best:
                best = basis[i]
                r = i
                to_upper = up
        leaving = basis[r]
        for i in range(m):
            beta[i] -= t_row * col[i]
        beta[r] = t_row if delta > 0 else upper[q] - t_row
        piv = T[r, q]
        for j in range(ncol):
            prow[j] = T[r, j] / piv
        for i in range(m):
            if i == r:
                continue
            f = T[i, q]
            if f != 0.0:
                for j in range(ncol):
                    T[i, j] -= f * prow[j]
        for j in range(ncol):
            T[r, j] = prow[j]
        dq = d[q]
        for j in range(ncol):
            d[j] -= dq * prow[j]
        basis[r] = q
        is_basic[q] = True
        at_upper[q] = False
        is_basic[leaving] = False
        at_upper[leaving] = to_upper
        streak = streak + 1 if t_row <= tol else 0
    return ITERATION_LIMIT, n_piv


simplex_iterate_numpy = _simplex_iterate
simplex_iterate_numba = _accel.njit(_simplex_loops)


def simplex_iterate(*args, use_numba=None):
    if use_numba is None:
        use_numba = _accel.NUMBA_ENABLED
    fn = simplex_iterate_numba if use_numba else simplex_iterate_numpy
    return fn(*args)
