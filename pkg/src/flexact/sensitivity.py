"""Perturb-and-observe sensitivities of voltage magnitude and branch loading.

Tables are indexed ``[obs_phase, obs_bus, pert_phase, pert_bus]`` (branch
tables ``[obs_phase, branch, pert_phase, pert_bus]``). A positive
perturbation adds load, so own-bus voltage sensitivities are negative.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from flexact import fas
from flexact.powerflow import PowerFlowError, branch_flows, solve_timestep

log = logging.getLogger(__name__)

DEFAULT_LEVELS = (0.001, 0.002, 0.005)
SENS_TOL = 1e-11


class SensitivityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SensitivityTable:
    nvs_p: np.ndarray
    nvs_q: np.ndarray
    levels: tuple
    reference: str
    perturbed: np.ndarray  # (3, n_bus) bool
    per_level_p: np.ndarray
    per_level_q: np.ndarray

    def self_p(self):
        """Own phase, own bus entries, (3, n_bus)."""
        return np.einsum("pkpk->pk", self.nvs_p)

    def self_q(self):
        return np.einsum("pkpk->pk", self.nvs_q)


@dataclass(frozen=True, eq=False)
class ThermalSensitivityTable:
    projected_p: np.ndarray  # percent per pu, [obs_phase, obs_bus, pert_phase, pert_bus]
    projected_q: np.ndarray
    branch_p: np.ndarray     # complex sending-end power per pu, [phase, branch, pert_phase, pert_bus]
    branch_q: np.ndarray
    levels: tuple
    reference: str
    perturbed: np.ndarray


@dataclass(frozen=True, eq=False)
class _Observation:
    vm: np.ndarray         # (3, n_bus)
    projected: np.ndarray  # (3, n_bus) signed percent
    s_branch: np.ndarray   # (3, n_branch) complex


def _observe(model, s_load, tol, use_numba):
    sol = solve_timestep(model, s_load, tol=tol, use_numba=use_numba)
    s_from, _, loading, sign = branch_flows(model, sol.voltage, sol.current)
    proj = fas.project_loading_all(model, sign * loading)
    return _Observation(vm=np.abs(sol.voltage), projected=proj, s_branch=s_from)


def _targets(model, targets):
    if targets is None:
        targets = model.device_mask()
    targets = np.asarray(targets, bool) & model.phase_mask
    targets[:, model.slack] = False
    return targets


def _perturb_all(model, base_load, levels, targets, tol, use_numba):
    levels = tuple(float(x) for x in levels)
    if not levels:
        raise SensitivityError("empty levels")
    if any(x == 0 for x in levels):
        raise SensitivityError("perturbation levels must be nonzero")
    base_load = np.asarray(base_load, dtype=complex)
    try:
        ref = _observe(model, base_load, tol, use_numba)
    except PowerFlowError as exc:
        raise SensitivityError(f"reference power flow failed: {exc}") from exc
    n, nb = model.n_bus, model.n_branch
    kept, results = [], []
    pairs = list(zip(*np.nonzero(targets)))
    for level in levels:
        out = {key: np.zeros(shape, dtype=dt) for key, shape, dt in (
            ("vp", (3, n, 3, n), float), ("vq", (3, n, 3, n), float),
            ("tp", (3, n, 3, n), float), ("tq", (3, n, 3, n), float),
            ("sp", (3, nb, 3, n), complex), ("sq", (3, nb, 3, n), complex))}
        try:
            for p, k in pairs:
                for kind, delta in (("p", level), ("q", 1j * level)):
                    s = base_load.copy()
                    s[p, k] += delta
                    obs = _observe(model, s, tol, use_numba)
                    out["v" + kind][:, :, p, k] = (obs.vm - ref.vm) / level
                    out["t" + kind][:, :, p, k] = (obs.projected - ref.projected) / level
                    out["s" + kind][:, :, p, k] = (obs.s_branch - ref.s_branch) / level
        except PowerFlowError as exc:
            warnings.warn(f"perturbation level {level} dropped: {exc}", RuntimeWarning)
            continue
        kept.append(level)
        results.append(out)
    if not kept:
        raise SensitivityError("power flow diverged at every perturbation level")
    stacked = {key: np.stack([r[key] for r in results]) for key in results[0]}
    return tuple(kept), stacked


def compute_nvs(model, base_load, perturbation_levels=DEFAULT_LEVELS, reference="base",
                targets=None, tol=SENS_TOL, use_numba=None):
    """Nodal voltage sensitivities, averaged over perturbation levels.

    Only (phase, bus) pairs hosting a device are perturbed unless ``targets``
    (a (3, n_bus) bool mask) says otherwise. P and Q are perturbed separately.
    """
    targets = _targets(model, targets)
    kept, st = _perturb_all(model, base_load, perturbation_levels, targets, tol, use_numba)
    return SensitivityTable(nvs_p=st["vp"].mean(axis=0), nvs_q=st["vq"].mean(axis=0),
                            levels=kept, reference=reference, perturbed=targets,
                            per_level_p=st["vp"], per_level_q=st["vq"])


def compute_thermal_sensitivity(model, base_load, perturbation_levels=DEFAULT_LEVELS,
                                reference="base", targets=None, tol=SENS_TOL, use_numba=None):
    targets = _targets(model, targets)
    kept, st = _perturb_all(model, base_load, perturbation_levels, targets, tol, use_numba)
    return _thermal_table(st, kept, reference, targets)


def _thermal_table(st, kept, reference, targets):
    return ThermalSensitivityTable(projected_p=st["tp"].mean(axis=0), projected_q=st["tq"].mean(axis=0),
                                   branch_p=st["sp"].mean(axis=0), branch_q=st["sq"].mean(axis=0),
                                   levels=kept, reference=reference, perturbed=targets)


def compute_all(model, base_load, perturbation_levels=DEFAULT_LEVELS, reference="base",
                targets=None, tol=SENS_TOL, use_numba=None):
    """Both tables from one set of perturbed power flows."""
    targets = _targets(model, targets)
    kept, st = _perturb_all(model, base_load, perturbation_levels, targets, tol, use_numba)
    nvs = SensitivityTable(nvs_p=st["vp"].mean(axis=0), nvs_q=st["vq"].mean(axis=0),
                           levels=kept, reference=reference, perturbed=targets,
                           per_level_p=st["vp"], per_level_q=st["vq"])
    return nvs, _thermal_table(st, kept, reference, targets)


def reference_load(net_load, reference="mean"):
    """Pick the snapshot the sensitivities are taken around.

    ``"mean"`` averages the horizon, an integer selects that step.
    """
    if reference == "mean":
        return net_load.mean(axis=0)
    return net_load[int(reference)]
