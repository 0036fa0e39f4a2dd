"""Per-step resource activation: gate flexibility by the signal field, then
dispatch it with a successive LP certified by the exact power flow.

Sign conventions (per-unit, per phase):

* ``dp_up`` >= 0 lowers net load (ramp down / injection),
* ``dp_dn`` <= 0 raises net load (ramp up / consumption),
* ``dq_up`` >= 0 is capacitive injection, ``dq_dn`` <= 0 inductive,
* ``p_curt`` >= 0 sheds load, ``g_curt`` >= 0 curtails generation.

Net load change: ``dP = -dp_up - dp_dn - p_curt + g_curt``,
``dQ = -dq_up - dq_dn``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from flexact import lp, sensitivity
from flexact.powerflow import (PowerFlowError, angle_spread, assemble_state, branch_flows,
                               scan_incidents, solve_timestep)

log = logging.getLogger(__name__)

CURT_FACTOR = 1.2


class ActivationError(RuntimeError):
    pass


class PriceError(ActivationError):
    def __init__(self, violations):
        super().__init__(f"{len(violations)} signal value(s) not below the curtailment price")
        self.violations = violations


@dataclass(frozen=True, eq=False)
class GatedLimits:
    p_max: np.ndarray  # (T, 3, n_bus) pu
    p_min: np.ndarray
    q_max: np.ndarray
    q_min: np.ndarray


def gate_limits(fas, raw):
    """Keep a raw bound only where its signal channel is nonzero."""
    for a, b in ((fas.p_up, raw.p_max), (fas.p_dn, raw.p_min), (fas.q_up, raw.q_max), (fas.q_dn, raw.q_min)):
        if a.shape != b.shape:
            raise ActivationError(f"signal shape {a.shape} does not match limit shape {b.shape}")
    return GatedLimits(p_max=np.where(fas.p_up != 0, raw.p_max, 0.0),
                       p_min=np.where(fas.p_dn != 0, raw.p_min, 0.0) + 0.0,
                       q_max=np.where(fas.q_up != 0, raw.q_max, 0.0),
                       q_min=np.where(fas.q_dn != 0, raw.q_min, 0.0) + 0.0)


def curtailment_prices(fas, limits):
    """Load and generation curtailment prices.

    Unset prices default to ``CURT_FACTOR`` times the larger of the highest
    saturation level and the highest signal magnitude in the field.
    """
    ref = fas.max_abs
    if fas.saturation is not None:
        ref = max(ref, fas.saturation.max_level)
    default = CURT_FACTOR * ref if ref > 0 else 1.0
    p = limits.curt_price_p if limits.curt_price_p is not None else default
    g = limits.curt_price_g if limits.curt_price_g is not None else default
    return float(p), float(g)


def price_check(fas, limits, prices=None):
    """Return the list of ``(t, phase, bus, value)`` where the signal is not
    strictly below both curtailment prices (empty when compliant)."""
    price_p, price_g = prices if prices is not None else curtailment_prices(fas, limits)
    level = np.maximum(fas.p_up, np.abs(fas.p_dn))
    bad = np.argwhere(level >= min(price_p, price_g))
    return [(int(t), int(p), int(k), float(level[t, p, k])) for t, p, k in bad]


@dataclass(frozen=True)
class ActivationSettings:
    trust: float = 0.2          # fraction of each bound per SLP iteration
    max_iter: int = 15
    obj_tol: float = 1e-6
    v_margin: float = 1e-4      # pu kept inside the hard voltage limits
    th_margin: float = 1e-3     # fraction of rating kept free
    angle_max_deg: float = 30.0
    backend: str = "simplex"
    hierarchy: bool = True      # try flexibility alone before enabling curtailment
    refresh_sensitivity: bool = False
    elastic_factor: float = 1e3

    def __post_init__(self):
        if not 0 < self.trust <= 1:
            raise ActivationError("trust must lie in (0, 1]")
        if self.max_iter < 1:
            raise ActivationError("max_iter must be at least 1")


@dataclass(frozen=True, eq=False)
class StepResult:
    dp_up: np.ndarray  # (3, n_bus)
    dp_dn: np.ndarray
    dq_up: np.ndarray
    dq_dn: np.ndarray
    p_curt: np.ndarray
    g_curt: np.ndarray
    objective: float
    solution: object   # powerflow.StepSolution after dispatch
    theta: np.ndarray  # (3, n_bus) LP epigraph values (zero where unused)
    deviation: np.ndarray  # (3, n_bus) linearised V - mean(V) at the LP optimum
    iterations: int
    certified: bool
    used_curtailment_stage: bool
    log: list = field(default_factory=list)

    def net_change(self):
        dp = -self.dp_up - self.dp_dn - self.p_curt + self.g_curt
        dq = -self.dq_up - self.dq_dn
        return dp + 1j * dq


@dataclass(frozen=True, eq=False)
class ActivationResult:
    dp_up: np.ndarray  # (T, 3, n_bus)
    dp_dn: np.ndarray
    dq_up: np.ndarray
    dq_dn: np.ndarray
    p_curt: np.ndarray
    g_curt: np.ndarray
    objective: np.ndarray  # (T,)
    state: object          # powerflow.GridState after dispatch
    theta: np.ndarray
    deviation: np.ndarray
    iterations: np.ndarray
    certified: np.ndarray
    curtailment_stage: np.ndarray
    failures: list = field(default_factory=list)
    logs: list = field(default_factory=list)

    @property
    def total_objective(self):
        return float(self.objective.sum())

    @property
    def feasible(self):
        return bool(self.certified.all())


# Variable blocks of the step LP. Each entry: (name, dP sign, dQ sign).
_BLOCKS = (("dp_up", -1.0, 0.0), ("dp_dn", 1.0, 0.0), ("dq_up", 0.0, -1.0), ("dq_dn", 0.0, 1.0),
           ("p_curt", -1.0, 0.0), ("g_curt", 1.0, 0.0))


@dataclass(frozen=True, eq=False)
class _StepData:
    pairs: np.ndarray   # (n_pairs, 2) phase, bus
    upper: dict         # block -> (n_pairs,) magnitude bound
    cost: dict          # block -> (n_pairs,) cost per unit magnitude
    s0: np.ndarray      # (3, n_bus) base net load


def _step_data(model, nvs, fas, gated, demand, gen, s0, t, prices, allow_curtailment):
    pairs = np.argwhere(nvs.perturbed)
    ph, bus = pairs[:, 0], pairs[:, 1]
    upper = {"dp_up": gated.p_max[t][ph, bus], "dp_dn": -gated.p_min[t][ph, bus],
             "dq_up": gated.q_max[t][ph, bus], "dq_dn": -gated.q_min[t][ph, bus],
             "p_curt": demand[t][ph, bus] if allow_curtailment else np.zeros(len(pairs)),
             "g_curt": gen[t][ph, bus] if allow_curtailment else np.zeros(len(pairs))}
    cost = {"dp_up": fas.p_up[t][ph, bus], "dp_dn": -fas.p_dn[t][ph, bus],
            "dq_up": fas.q_up[t][ph, bus], "dq_dn": -fas.q_dn[t][ph, bus],
            "p_curt": np.full(len(pairs), prices[0]), "g_curt": np.full(len(pairs), prices[1])}
    return _StepData(pairs=pairs, upper={k: np.maximum(v, 0.0) for k, v in upper.items()},
                     cost=cost, s0=s0)


def _net_change(model, data, x):
    """Net load change (3, n_bus) for magnitudes ``x`` (block -> (n_pairs,))."""
    dp = np.zeros((3, model.n_bus))
    dq = np.zeros((3, model.n_bus))
    ph, bus = data.pairs[:, 0], data.pairs[:, 1]
    for name, sp, sq in _BLOCKS:
        np.add.at(dp, (ph, bus), sp * x[name])
        np.add.at(dq, (ph, bus), sq * x[name])
    return dp + 1j * dq


def _net_wash_trades(x):
    """Offset simultaneous up and down activation at one (phase, bus)."""
    out = dict(x)
    for up, dn in (("dp_up", "dp_dn"), ("dq_up", "dq_dn")):
        net = x[dn] - x[up]
        out[up] = np.maximum(-net, 0.0)
        out[dn] = np.maximum(net, 0.0)
    return out


def _exact(model, s):
    sol = solve_timestep(model, s)
    s_from, s_to, loading, sign = branch_flows(model, sol.voltage, sol.current)
    return sol, s_from, s_to, loading


def _hard_ok(model, sol, loading, limits):
    vm = np.abs(sol.voltage)[model.phase_mask]
    bmask = model.phase_mask[:, model.topology.downstream]
    return bool(np.all(vm >= limits.v_min) and np.all(vm <= limits.v_max)
                and np.all(loading[bmask] <= 100.0))


def _build_lp(model, data, nvs, tsens, x_k, sol, s_from, s_to, limits, G_V, settings, elastic_price):
    """Assemble the LP around the exact point ``x_k``; returns everything
    needed to map the LP solution back."""
    pairs = data.pairs
    # variables: active (block, pair) entries with a positive upper bound
    var_block, var_pair, lo, hi, cost = [], [], [], [], []
    for name, _, _ in _BLOCKS:
        u = data.upper[name]
        for j in np.flatnonzero(u > 0):
            step = settings.trust * u[j]
            var_block.append(name)
            var_pair.append(j)
            lo.append(max(0.0, x_k[name][j] - step))
            hi.append(min(u[j], x_k[name][j] + step))
            cost.append(data.cost[name][j])
    nx = len(var_block)
    lo, hi, cost = np.array(lo), np.array(hi), np.array(cost)
    var_pair = np.array(var_pair, dtype=int)
    sgn = {name: (sp, sq) for name, sp, sq in _BLOCKS}
    sp = np.array([sgn[b][0] for b in var_block])
    sq = np.array([sgn[b][1] for b in var_block])
    xk_vec = np.array([x_k[b][j] for b, j in zip(var_block, var_pair)])
    ph, bus = pairs[var_pair, 0], pairs[var_pair, 1]

    n = model.n_bus
    # voltage coefficients (3, n, nx) per unit of variable magnitude
    if nx:
        av = nvs.nvs_p[:, :, ph, bus] * sp + nvs.nvs_q[:, :, ph, bus] * sq
        ab = tsens.branch_p[:, :, ph, bus] * sp + tsens.branch_q[:, :, ph, bus] * sq
    else:
        av = np.zeros((3, n, 0))
        ab = np.zeros((3, model.n_branch, 0), dtype=complex)
    span = hi - lo
    shift = lo - xk_vec  # x = lo + z, so x - x_k = shift + z
    vk = np.abs(sol.voltage)
    v0 = vk + av @ shift  # value at z = 0

    rows, rhs, kinds = [], [], []
    energised = model.phase_mask.copy()
    energised[:, model.slack] = False
    v_hi = limits.v_max - settings.v_margin
    v_lo = limits.v_min + settings.v_margin
    reach_up = np.clip(av, 0, None) @ span
    reach_dn = np.clip(av, None, 0) @ span
    for p, k in np.argwhere(energised):
        if v0[p, k] + reach_up[p, k] > v_hi:
            rows.append(av[p, k]); rhs.append(v_hi - v0[p, k]); kinds.append(("v_hi", p, k))
        if v0[p, k] + reach_dn[p, k] < v_lo:
            rows.append(-av[p, k]); rhs.append(v0[p, k] - v_lo); kinds.append(("v_lo", p, k))

    bmask = model.phase_mask[:, model.topology.downstream]
    s_lim = model.s_max_pu * (1.0 - settings.th_margin)
    mag = np.maximum(np.abs(s_from), np.abs(s_to))
    s_ref = np.where(np.abs(s_from) >= np.abs(s_to), s_from, s_to)
    for p, b in np.argwhere(bmask):
        if mag[p, b] < 1e-12:
            continue
        u = np.conj(s_ref[p, b]) / mag[p, b]
        coef = np.real(u * ab[p, b])
        base = mag[p, b] + coef @ shift
        if base + np.clip(coef, 0, None) @ span > s_lim[b]:
            rows.append(coef); rhs.append(s_lim[b] - base); kinds.append(("th", p, b))

    n_elastic = len(rows)
    theta_idx = []
    tp = model.three_phase_buses()
    tp = tp[tp != model.slack]
    dev_rows = []
    if G_V > 0:
        for k in tp:
            dev0 = vk[:, k] - vk[:, k].mean() + (av[:, k] - av[:, k].mean(axis=0)) @ shift
            dcoef = av[:, k] - av[:, k].mean(axis=0)
            for p in range(3):
                theta_idx.append((p, k))
                dev_rows.append((dev0[p], dcoef[p]))
    n_theta = len(theta_idx)
    # deviation = theta_plus - theta_minus, one equality row per (phase, bus)
    ntot = nx + 2 * n_theta + n_elastic
    A = np.zeros((n_elastic, ntot))
    b = np.array(rhs, dtype=float)
    for i, row in enumerate(rows):
        A[i, :nx] = row
        A[i, nx + 2 * n_theta + i] = -1.0
    A_eq = np.zeros((n_theta, ntot))
    b_eq = np.zeros(n_theta)
    for j, (dev0, dcoef) in enumerate(dev_rows):
        A_eq[j, :nx] = dcoef
        A_eq[j, nx + 2 * j] = -1.0
        A_eq[j, nx + 2 * j + 1] = 1.0
        b_eq[j] = -dev0
    c = np.concatenate([cost, np.full(2 * n_theta, G_V), np.full(n_elastic, elastic_price)])
    upper = np.concatenate([span, np.full(2 * n_theta + n_elastic, np.inf)])
    return dict(c=c, A=A, b=b, A_eq=A_eq, b_eq=b_eq, upper=upper, nx=nx, n_theta=n_theta,
                n_elastic=n_elastic, var_block=var_block, var_pair=var_pair, lo=lo,
                theta_idx=theta_idx, dev_rows=dev_rows, kinds=kinds)


def _run_slp(model, data, nvs, tsens, limits, G_V, settings, elastic_price, x_start, backend):
    npair = len(data.pairs)
    x_k = {name: x_start[name].copy() for name, _, _ in _BLOCKS} if x_start else \
        {name: np.zeros(npair) for name, _, _ in _BLOCKS}
    history = []
    sol, s_from, s_to, loading = _exact(model, data.s0 + _net_change(model, data, x_k))
    prev_obj = None
    theta = np.zeros((3, model.n_bus))
    deviation = np.zeros((3, model.n_bus))
    obj = 0.0
    ok = _hard_ok(model, sol, loading, limits)
    for it in range(1, settings.max_iter + 1):
        if settings.refresh_sensitivity:
            nvs, tsens = sensitivity.compute_all(model, data.s0 + _net_change(model, data, x_k),
                                                 targets=nvs.perturbed)
        lpd = _build_lp(model, data, nvs, tsens, x_k, sol, s_from, s_to, limits, G_V,
                        settings, elastic_price)
        if lpd["c"].size == 0:
            history.append({"iter": it, "status": "empty", "objective": 0.0, "hard_ok": ok})
            return x_k, sol, 0.0, theta, deviation, it, ok, history
        res = backend.solve(lpd["c"], lpd["A"], lpd["b"], lpd["A_eq"], lpd["b_eq"], upper=lpd["upper"])
        if not res.ok:
            raise ActivationError(f"LP {res.status} at SLP iteration {it}")
        z = res.x
        nx, nth = lpd["nx"], lpd["n_theta"]
        x_new = {name: np.zeros(npair) for name, _, _ in _BLOCKS}
        for i, (name, j) in enumerate(zip(lpd["var_block"], lpd["var_pair"])):
            x_new[name][j] = lpd["lo"][i] + z[i]
        x_new = _net_wash_trades(x_new)
        theta = np.zeros((3, model.n_bus))
        deviation = np.zeros((3, model.n_bus))
        for j, (p, k) in enumerate(lpd["theta_idx"]):
            theta[p, k] = z[nx + 2 * j] + z[nx + 2 * j + 1]
            dev0, dcoef = lpd["dev_rows"][j]
            deviation[p, k] = dev0 + dcoef @ z[:nx]
        elastic = float(z[nx + 2 * nth:].sum())
        obj = float(sum(data.cost[name] @ x_new[name] for name, _, _ in _BLOCKS) + G_V * theta.sum())
        try:
            sol, s_from, s_to, loading = _exact(model, data.s0 + _net_change(model, data, x_new))
        except PowerFlowError as exc:
            raise ActivationError(f"power flow failed after SLP iteration {it}: {exc}") from exc
        ok = _hard_ok(model, sol, loading, limits)
        step = max(float(np.abs(x_new[k] - x_k[k]).max(initial=0.0)) for k in x_new)
        history.append({"iter": it, "status": res.status, "objective": obj, "elastic": elastic,
                        "hard_ok": ok, "step": step, "rows": len(lpd["kinds"])})
        x_k = x_new
        if ok and prev_obj is not None and abs(obj - prev_obj) < settings.obj_tol:
            break
        if ok and step < 1e-10:
            break
        prev_obj = obj
    return x_k, sol, obj, theta, deviation, it, ok, history


def solve_step(model, s0, demand, gen, fas, gated, nvs, tsens, limits, G_V, t,
               settings=None, prices=None, backend=None):
    """Dispatch one step.

    ``s0`` is the (3, n_bus) complex base net load, ``demand`` and ``gen`` the
    (T, 3, n_bus) curtailable amounts.
    """
    settings = settings or ActivationSettings()
    prices = prices or curtailment_prices(fas, limits)
    backend = backend or lp.get_backend(settings.backend)
    elastic_price = settings.elastic_factor * max(prices)
    stages = (False, True) if settings.hierarchy else (True,)
    x_start = None
    logs = []
    total_iter = 0
    for allow in stages:
        data = _step_data(model, nvs, fas, gated, demand, gen, s0, t, prices, allow)
        x, sol, obj, theta, dev, it, ok, hist = _run_slp(model, data, nvs, tsens, limits, G_V,
                                                         settings, elastic_price, x_start, backend)
        total_iter += it
        logs.append({"curtailment": allow, "history": hist})
        if ok:
            break
        x_start = x
    cert = ok and _certify(model, sol, limits, settings, data, x)
    zeros = np.zeros((3, model.n_bus))
    out = {}
    ph, bus = data.pairs[:, 0], data.pairs[:, 1]
    for name, _, _ in _BLOCKS:
        arr = zeros.copy()
        arr[ph, bus] = x[name]
        out[name] = arr
    return StepResult(dp_up=out["dp_up"], dp_dn=-out["dp_dn"] + 0.0, dq_up=out["dq_up"],
                      dq_dn=-out["dq_dn"] + 0.0, p_curt=out["p_curt"], g_curt=out["g_curt"],
                      objective=obj, solution=sol, theta=theta, deviation=dev,
                      iterations=total_iter, certified=cert, used_curtailment_stage=allow,
                      log=logs)


def _certify(model, sol, limits, settings, data, x, tol=1e-6):
    for name, _, _ in _BLOCKS:
        if np.any(x[name] < -tol) or np.any(x[name] > data.upper[name] + tol):
            return False
    v = sol.voltage
    topo = model.topology
    ang = np.angle(v[:, topo.upstream] * np.conj(v[:, topo.downstream]))
    bmask = model.phase_mask[:, topo.downstream]
    if np.any(np.abs(ang[bmask]) > np.deg2rad(settings.angle_max_deg)):
        log.warning("branch angle bound exceeded after dispatch")
        return False
    return True


def solve_horizon(model, profiles, fas, gated, nvs, tsens, limits, G_V, settings=None,
                  steps=None, backend=None):
    """Dispatch every step independently; the total objective is the sum of
    per-step objectives."""
    settings = settings or ActivationSettings()
    demand, gen, q = profiles.per_phase(model)
    s_base = (demand - gen) + 1j * q
    T = s_base.shape[0]
    prices = curtailment_prices(fas, limits)
    bad = price_check(fas, limits, prices)
    if bad:
        raise PriceError(bad)
    backend = backend or lp.get_backend(settings.backend)
    steps = range(T) if steps is None else steps
    results, failures = [], []
    for t in steps:
        try:
            r = solve_step(model, s_base[t], demand, gen, fas, gated, nvs, tsens, limits, G_V, t,
                           settings=settings, prices=prices, backend=backend)
        except (ActivationError, PowerFlowError) as exc:
            failures.append((t, str(exc)))
            log.error("step %d failed: %s", t, exc)
            r = None
        if r is not None and not r.certified:
            failures.append((t, "hard limits not met after successive LP"))
        results.append((t, r))
    return _assemble(model, s_base, results, failures)


def _assemble(model, s_base, results, failures):
    n = model.n_bus
    T = len(results)
    arr = {k: np.zeros((T, 3, n)) for k in ("dp_up", "dp_dn", "dq_up", "dq_dn", "p_curt", "g_curt",
                                            "theta", "deviation")}
    obj = np.zeros(T)
    iters = np.zeros(T, dtype=int)
    cert = np.zeros(T, dtype=bool)
    stage = np.zeros(T, dtype=bool)
    sols, loads, logs = [], [], []
    for i, (t, r) in enumerate(results):
        if r is None:
            sols.append(solve_timestep(model, s_base[t], t=t))
            loads.append(s_base[t])
            logs.append([])
            continue
        for k in arr:
            arr[k][i] = getattr(r, k)
        obj[i] = r.objective
        iters[i] = r.iterations
        cert[i] = r.certified
        stage[i] = r.used_curtailment_stage
        sols.append(r.solution)
        loads.append(s_base[t] + r.net_change())
        logs.append(r.log)
    state = assemble_state(model, np.stack(loads), sols)
    return ActivationResult(**{k: arr[k] for k in ("dp_up", "dp_dn", "dq_up", "dq_dn", "p_curt", "g_curt")},
                            objective=obj, state=state, theta=arr["theta"], deviation=arr["deviation"],
                            iterations=iters, certified=cert, curtailment_stage=stage,
                            failures=failures, logs=logs)


def corrected_incidents(result, limits, model=None):
    return scan_incidents(result.state, limits, model)


def max_angle_deg(model, state):
    return float(np.rad2deg(np.abs(angle_spread(model, state)).max()))
