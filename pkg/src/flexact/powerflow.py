"""Three-phase unbalanced power flow on radial feeders and incident scans."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from flexact import kernels
from flexact.netmodel import ProfileSet

log = logging.getLogger(__name__)

TOL_PF = 1e-8
MAX_ITER_PF = 100


class PowerFlowError(RuntimeError):
    def __init__(self, message, step=None, mismatch=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
        self.mismatch = mismatch


@dataclass(frozen=True, eq=False)
class StepSolution:
    voltage: np.ndarray  # (3, n_bus) complex pu
    current: np.ndarray  # (3, n_branch) complex pu, upstream -> downstream
    iterations: int
    mismatch: float
    fallback: bool = False


def _fixed_point(model, s_load, tol, max_iter, damping=0.5):
    """Damped current-injection fixed point, used when the plain sweep stalls."""
    path = model.topology.path
    v0 = model.slack_phasors()
    v = np.repeat(v0[:, None], model.n_bus, axis=1).astype(complex)
    nonslack = path.any(axis=1)
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            i_node = np.where(v != 0, np.conj(s_load / v), 0.0)
        j = i_node @ path
        v_new = v0[:, None] - np.einsum("bpq,qb->pb", model.z_pu, j) @ path.T
        step = np.abs(v_new - v).max()
        v = v + damping * (v_new - v)
        if not np.isfinite(step):
            break
        if step < tol:
            with np.errstate(divide="ignore", invalid="ignore"):
                i_node = np.where(v != 0, np.conj(s_load / v), 0.0)
            j = i_node @ path
            v = v0[:, None] - np.einsum("bpq,qb->pb", model.z_pu, j) @ path.T
            err = np.abs(v * np.conj(i_node) - s_load)[:, nonslack]
            return v, j, it, float(err.max()) if err.size else 0.0
    return v, None, max_iter, np.inf


def solve_timestep(model, s_load, t=None, tol=TOL_PF, max_iter=MAX_ITER_PF, use_numba=None):
    """Solve one snapshot.

    ``s_load`` is the (3, n_bus) complex per-unit net load, consumption
    positive. Every step starts flat at the slack phasors.
    """
    s_load = np.asarray(s_load, dtype=complex)
    if not np.all(np.isfinite(s_load)):
        raise PowerFlowError("non-finite injection", step=t)
    v, j, it, mism = kernels.sweep(model.topology, model.z_pu, s_load,
                                   model.slack_phasors(), tol, max_iter, use_numba=use_numba)
    if mism < tol:
        return StepSolution(voltage=v, current=j, iterations=int(it), mismatch=float(mism))
    log.debug("sweep stalled at step %s (mismatch %.3g); trying damped fixed point", t, mism)
    v, j, it, mism2 = _fixed_point(model, s_load, tol, 20 * max_iter)
    if mism2 < tol:
        return StepSolution(voltage=v, current=j, iterations=int(it), mismatch=float(mism2),
                            fallback=True)
    worst = mism if np.isfinite(mism) else mism2
    raise PowerFlowError(f"power flow did not converge after {max_iter} iterations "
                         f"(worst mismatch {worst:.3g} pu)", step=t, mismatch=worst)


def branch_flows(model, voltage, current):
    """Sending/receiving power, loading percent and flow sign per branch-phase.

    Works on (..., 3, n_bus) voltages and (..., 3, n_branch) currents.
    """
    topo = model.topology
    v_up = voltage[..., topo.upstream]
    v_dn = voltage[..., topo.downstream]
    s_from = v_up * np.conj(current)
    s_to = v_dn * np.conj(current)
    loading = 100.0 * np.maximum(np.abs(s_from), np.abs(s_to)) / model.s_max_pu
    sign = np.where(np.abs(v_up) >= np.abs(v_dn), 1.0, -1.0)
    return s_from, s_to, loading, sign


@dataclass(frozen=True, eq=False)
class GridState:
    """Horizon solution; arrays are indexed (t, phase, bus|branch)."""
    voltage: np.ndarray
    current: np.ndarray
    s_load: np.ndarray
    loading: np.ndarray     # percent of rating, magnitude
    flow_sign: np.ndarray   # +1 forward (substation -> feeder end), -1 reverse
    converged: np.ndarray
    mismatch: np.ndarray
    phase_mask: np.ndarray  # (3, n_bus)
    branch_mask: np.ndarray  # (3, n_branch)

    @property
    def T(self):
        return self.voltage.shape[0]

    @property
    def V(self):
        return np.abs(self.voltage)

    @property
    def theta(self):
        return np.angle(self.voltage)

    @property
    def signed_loading(self):
        return self.flow_sign * self.loading


def assemble_state(model, s_load, solutions):
    voltage = np.stack([s.voltage for s in solutions])
    current = np.stack([s.current for s in solutions])
    _, _, loading, sign = branch_flows(model, voltage, current)
    branch_mask = model.phase_mask[:, model.topology.downstream]
    return GridState(voltage=voltage, current=current, s_load=np.asarray(s_load),
                     loading=np.where(branch_mask, loading, 0.0),
                     flow_sign=sign,
                     converged=np.ones(len(solutions), dtype=bool),
                     mismatch=np.array([s.mismatch for s in solutions]),
                     phase_mask=model.phase_mask, branch_mask=branch_mask)


def solve_horizon(model, profiles, tol=TOL_PF, max_iter=MAX_ITER_PF, use_numba=None):
    """Solve every time step independently; ``profiles`` is a ProfileSet or a
    (T, 3, n_bus) complex net-load array."""
    s_load = profiles.net_load(model) if isinstance(profiles, ProfileSet) else np.asarray(profiles)
    sols = [solve_timestep(model, s_load[t], t=t, tol=tol, max_iter=max_iter, use_numba=use_numba)
            for t in range(s_load.shape[0])]
    return assemble_state(model, s_load, sols)


def power_balance_residual(model, state):
    """Slack import minus losses minus served load, per step (complex pu)."""
    topo = model.topology
    k0 = model.slack
    feeders = np.flatnonzero(topo.upstream == k0)
    v = state.voltage
    j = state.current
    slack_import = np.einsum("tp,tpb->t", v[:, :, k0], np.conj(j[:, :, feeders]))
    dv = v[..., topo.upstream] - v[..., topo.downstream]
    losses = np.einsum("tpb,tpb->t", dv, np.conj(j))
    return slack_import - losses - state.s_load.sum(axis=(1, 2))


def branch_losses(model, state):
    topo = model.topology
    dv = state.voltage[..., topo.upstream] - state.voltage[..., topo.downstream]
    return (dv * np.conj(state.current)).sum(axis=1)


def angle_spread(model, state):
    """Angle of V_up * conj(V_down) per (t, phase, branch), radians."""
    topo = model.topology
    ang = np.angle(state.voltage[..., topo.upstream] * np.conj(state.voltage[..., topo.downstream]))
    return np.where(state.branch_mask, ang, 0.0)


INCIDENT_ROWS = ("under_voltage", "below_soft", "over_voltage", "above_soft", "thermal_overload")


@dataclass(frozen=True)
class IncidentReport:
    counts: dict
    denominator: int
    labels: dict

    def percent(self, key):
        return 100.0 * self.counts[key] / self.denominator if self.denominator else 0.0

    @property
    def hard_total(self):
        return sum(self.counts[k] for k in ("under_voltage", "over_voltage", "thermal_overload"))

    def rows(self):
        return [(self.labels[k], self.counts[k], self.percent(k)) for k in INCIDENT_ROWS]


def scan_incidents(state, limits, model=None):
    """Count limit violations.

    Voltage rows count energised (phase, bus, t) instances; thermal rows count
    (phase, branch, t). Both percentages use the voltage instance count as
    denominator.
    """
    mask = np.broadcast_to(state.phase_mask, state.voltage.shape)
    V = state.V
    lo_soft = 1.0 - limits.dv_perm_lo
    hi_soft = 1.0 + limits.dv_perm_hi
    counts = {
        "under_voltage": int(np.count_nonzero((V < limits.v_min) & mask)),
        "below_soft": int(np.count_nonzero((V < lo_soft) & mask)),
        "over_voltage": int(np.count_nonzero((V > limits.v_max) & mask)),
        "above_soft": int(np.count_nonzero((V > hi_soft) & mask)),
        "thermal_overload": int(np.count_nonzero((state.loading > 100.0) & state.branch_mask)),
    }
    labels = {
        "under_voltage": "Under voltage",
        "below_soft": f"Voltage below {lo_soft:.2f} pu",
        "over_voltage": "Over voltage",
        "above_soft": f"Voltage above {hi_soft:.2f} pu",
        "thermal_overload": "Thermal overload",
    }
    return IncidentReport(counts=counts, denominator=int(np.count_nonzero(mask)), labels=labels)
