"""Nodal projections and flexibility activation signals.

Channel convention: ``p_up`` prices activation that lowers net load (ramp
down / injection) and is non-negative, ``p_dn`` prices activation that
raises net load and is non-positive. The reactive channels follow the same
layout with capacitive injection on ``q_up``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHANNELS = ("p_up", "p_dn", "q_up", "q_dn")


class FasError(ValueError):
    pass


def flow_direction(v_from, v_to):
    """+1 when the upstream magnitude is at least the downstream one, else -1."""
    out = np.where(np.asarray(v_from) >= np.asarray(v_to), 1, -1)
    return int(out) if out.ndim == 0 else out


def project_loading(loadings, zetas, ratings):
    """Rating-weighted signed loading of one node, in percent."""
    loadings, zetas, ratings = (np.asarray(a, dtype=float) for a in (loadings, zetas, ratings))
    total = ratings.sum()
    if loadings.size == 0 or total <= 0:
        raise FasError("node has no rated incident branch")
    return float((zetas * loadings * ratings).sum() / total)


def project_current(currents, zetas, ratings=None):
    """Signed sum of incident branch current magnitudes.

    With ``ratings`` the rating-weighted mean is returned instead.
    """
    currents, zetas = np.asarray(currents, dtype=float), np.asarray(zetas, dtype=float)
    if ratings is None:
        return float((zetas * currents).sum())
    ratings = np.asarray(ratings, dtype=float)
    if ratings.sum() <= 0:
        raise FasError("node has no rated incident branch")
    return float((zetas * currents * ratings).sum() / ratings.sum())


def _incidence(model):
    """(n_bus, n_branch) 0/1 matrix of bus-branch incidence."""
    topo = model.topology
    inc = np.zeros((model.n_bus, model.n_branch))
    cols = np.arange(model.n_branch)
    inc[topo.upstream, cols] = 1.0
    inc[topo.downstream, cols] = 1.0
    return inc


def _branch_phase_mask(model):
    return model.phase_mask[:, model.topology.downstream]


def project_loading_all(model, signed_loading):
    """Vectorised projection of (..., 3, n_branch) signed loading onto buses."""
    inc = _incidence(model)
    w = model.s_max_pu[None, :] * _branch_phase_mask(model)  # (3, n_branch)
    num = np.einsum("...pb,pb,nb->...pn", signed_loading, w, inc)
    den = np.einsum("pb,nb->pn", w, inc)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def project_current_all(model, signed_current, weighted=False):
    """Projection of (..., 3, n_branch) signed current magnitudes onto buses."""
    inc = _incidence(model)
    mask = _branch_phase_mask(model)
    if not weighted:
        return np.einsum("...pb,pb,nb->...pn", signed_current, mask.astype(float), inc)
    w = model.s_max_pu[None, :] * mask
    num = np.einsum("...pb,pb,nb->...pn", signed_current, w, inc)
    den = np.einsum("pb,nb->pn", w, inc)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass(frozen=True, eq=False)
class NodalProjection:
    loading: np.ndarray  # (T, 3, n_bus) signed percent
    current: np.ndarray  # (T, 3, n_bus) signed pu
    zeta: np.ndarray     # (T, 3, n_branch)


def project_state(model, state, weighted_current=False):
    zeta = state.flow_sign
    loading = project_loading_all(model, zeta * state.loading)
    current = project_current_all(model, zeta * np.abs(state.current), weighted=weighted_current)
    return NodalProjection(loading=loading, current=current, zeta=zeta)


@dataclass(frozen=True, eq=False)
class Saturation:
    vc_p: np.ndarray  # (3, n_bus)
    vc_q: np.ndarray
    tc_p: np.ndarray
    tc_q: np.ndarray

    @property
    def max_level(self):
        return float(max(a.max() for a in (self.vc_p, self.vc_q, self.tc_p, self.tc_q)))


def saturation_levels(nvs, kappa_v=1.0, kappa_t=1.0):
    """Saturation levels proportional to the own-phase sensitivity magnitude."""
    sp, sq = np.abs(nvs.self_p()), np.abs(nvs.self_q())
    if not (np.all(np.isfinite(sp)) and np.all(np.isfinite(sq))):
        raise FasError("sensitivity table has non-finite entries")
    if sp.max() <= 0:
        raise FasError("sensitivity table is all zero")
    np_ = sp / sp.max()
    nq = sq / sq.max() if sq.max() > 0 else np.zeros_like(sq)
    return Saturation(vc_p=kappa_v * np_, vc_q=kappa_v * nq, tc_p=kappa_t * np_, tc_q=kappa_t * nq)


def voltage_component(v, v_min, v_max, dv_lo, dv_hi, vc_max):
    """Volt-watt style droop; returns ``(up, dn)``."""
    v = np.asarray(v, dtype=float)
    lo, hi = 1.0 - dv_lo, 1.0 + dv_hi
    r_up = np.clip((lo - v) / (lo - v_min), 0.0, 1.0)
    r_dn = np.clip((v - hi) / (v_max - hi), 0.0, 1.0)
    return vc_max * r_up + 0.0, -vc_max * r_dn + 0.0


def thermal_component(t_proj, dt_perm, tc_max, mirror="even"):
    """Loading droop; returns ``(up, dn)``.

    Forward loading opens both channels symmetrically. Reverse loading uses
    the magnitude (``mirror="even"``) or flips both signs (``"odd"``).
    """
    t_proj = np.asarray(t_proj, dtype=float)
    r = np.clip((np.abs(t_proj) - dt_perm) / (100.0 - dt_perm), 0.0, 1.0)
    up, dn = tc_max * r, -tc_max * r
    if mirror == "odd":
        flip = t_proj < 0
        up, dn = np.where(flip, -up, up), np.where(flip, -dn, dn)
    elif mirror != "even":
        raise FasError(f"unknown mirror {mirror!r}")
    return up + 0.0, dn + 0.0


@dataclass(frozen=True, eq=False)
class ImbalanceField:
    u_v: np.ndarray    # (..., 3, n_bus)
    u_i: np.ndarray
    pvur: np.ndarray
    npcur: np.ndarray
    degenerate: np.ndarray  # (..., n_bus) True where a mean was ~0
    valid: np.ndarray       # (n_bus,) buses with all three phases


def imbalance_metrics(vmag, i_proj, phase_mask, eps=1e-9):
    """Magnitude-based voltage and current imbalance per phase.

    ``vmag`` and ``i_proj`` are (..., 3, n_bus). Buses missing a phase get
    zeros. A bus whose mean voltage or mean projected current is below
    ``eps`` in magnitude is flagged and its U values set to zero. The same
    applies to the current metric when the phases carry projected currents of
    opposite sign: the mean then sits near zero and the ratio is meaningless.
    """
    vmag = np.asarray(vmag, dtype=float)
    i_proj = np.asarray(i_proj, dtype=float)
    valid = np.asarray(phase_mask).all(axis=0)
    vbar = vmag.mean(axis=-2, keepdims=True)
    ibar = i_proj.mean(axis=-2, keepdims=True)
    v_ok = (np.abs(vbar) > eps) & valid
    mixed = (i_proj.max(axis=-2, keepdims=True) > eps) & (i_proj.min(axis=-2, keepdims=True) < -eps)
    i_ok = (np.abs(ibar) > eps) & ~mixed & valid
    with np.errstate(invalid="ignore", divide="ignore"):
        pvur = np.where(v_ok, vmag / np.where(v_ok, vbar, 1.0), 1.0)
        npcur = np.where(i_ok, i_proj / np.where(i_ok, ibar, 1.0), 1.0)
    u_v = np.where(v_ok, 1.0 - pvur, 0.0)
    u_i = np.where(i_ok, 1.0 - npcur, 0.0)
    degenerate = valid & ~(v_ok & i_ok)[..., 0, :]
    return ImbalanceField(u_v=u_v, u_i=u_i, pvur=pvur, npcur=npcur,
                          degenerate=degenerate, valid=valid)


def imbalance_component(imb, sign_normalized=False):
    """Imbalance channels; returns a dict keyed by ``CHANNELS``.

    The default places the current term with its own sign (so ``p_dn`` may
    be positive); ``sign_normalized`` negates the current term so every
    channel keeps its orientation.
    """
    u_v, u_i = imb.u_v, imb.u_i
    s = -1.0 if sign_normalized else 1.0
    out = {
        "p_up": np.where(u_v > 0, u_v, 0.0) + s * np.where(u_i < 0, u_i, 0.0),
        "p_dn": np.where(u_v < 0, u_v, 0.0) + s * np.where(u_i > 0, u_i, 0.0),
        "q_up": np.where(u_v > 0, u_v, 0.0),
        "q_dn": np.where(u_v < 0, u_v, 0.0),
    }
    return {k: v + 0.0 for k, v in out.items()}


@dataclass(frozen=True, eq=False)
class FasField:
    p_up: np.ndarray  # (T, 3, n_bus)
    p_dn: np.ndarray
    q_up: np.ndarray
    q_dn: np.ndarray
    components: dict = field(default_factory=dict)  # name -> {channel: array}
    saturation: Saturation | None = None
    mask: np.ndarray | None = None  # (3, n_bus) where devices attach

    def channel(self, name):
        return getattr(self, name)

    @property
    def T(self):
        return self.p_up.shape[0]

    @property
    def max_abs(self):
        return float(max(np.abs(getattr(self, c)).max() for c in CHANNELS))


def combine(voltage, thermal, imbalance, mask=None, saturation=None):
    """Channel-wise sum of the three component dicts.

    ``mask`` (3, n_bus) zeroes buses without devices.
    """
    parts = {"voltage": voltage, "thermal": thermal, "imbalance": imbalance}
    shape = None
    for name, comp in parts.items():
        for ch in CHANNELS:
            arr = np.asarray(comp[ch])
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise FasError(f"index mismatch: {name}.{ch} has shape {arr.shape}, expected {shape}")
    m = 1.0 if mask is None else np.asarray(mask, dtype=float)
    parts = {name: {ch: np.asarray(comp[ch]) * m + 0.0 for ch in CHANNELS} for name, comp in parts.items()}
    total = {ch: sum(parts[name][ch] for name in parts) for ch in CHANNELS}
    return FasField(**total, components=parts, saturation=saturation,
                    mask=None if mask is None else np.asarray(mask, bool))


def build_fas(model, state, nvs, limits, kappa_v=1.0, kappa_t=1.0, thermal_mirror="even",
              imb_sign_normalized=False, weighted_current=False):
    """Signals for every step of a solved horizon ``state``."""
    sat = saturation_levels(nvs, kappa_v=kappa_v, kappa_t=kappa_t)
    proj = project_state(model, state, weighted_current=weighted_current)
    V = state.V
    vp = voltage_component(V, limits.v_min, limits.v_max, limits.dv_perm_lo, limits.dv_perm_hi, sat.vc_p)
    vq = voltage_component(V, limits.v_min, limits.v_max, limits.dv_perm_lo, limits.dv_perm_hi, sat.vc_q)
    tp = thermal_component(proj.loading, limits.dt_perm, sat.tc_p, mirror=thermal_mirror)
    tq = thermal_component(proj.loading, limits.dt_perm, sat.tc_q, mirror=thermal_mirror)
    imb = imbalance_component(imbalance_metrics(V, proj.current, model.phase_mask),
                              sign_normalized=imb_sign_normalized)
    volt = dict(zip(CHANNELS, (*vp, *vq)))
    therm = dict(zip(CHANNELS, (*tp, *tq)))
    return combine(volt, therm, imb, mask=nvs.perturbed, saturation=sat)
