"""Sequence-component unbalance, G_V sweeps and knee selection."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from flexact import activation
from flexact.powerflow import scan_incidents

log = logging.getLogger(__name__)

A_OP = np.exp(2j * np.pi / 3)


class KneeWarning(UserWarning):
    pass


def sequence_components(v):
    """Zero, positive and negative sequence of (..., 3, n) phasors."""
    va, vb, vc = v[..., 0, :], v[..., 1, :], v[..., 2, :]
    v0 = (va + vb + vc) / 3.0
    v1 = (va + A_OP * vb + A_OP ** 2 * vc) / 3.0
    v2 = (va + A_OP ** 2 * vb + A_OP * vc) / 3.0
    return v0, v1, v2


def vuf_percent(v, eps=1e-9):
    """VUF of (..., 3, n) phasors; ``inf`` where the positive sequence vanishes."""
    _, v1, v2 = sequence_components(np.asarray(v, dtype=complex))
    m1, m2 = np.abs(v1), np.abs(v2)
    scale = np.abs(v).max(axis=-2)
    degenerate = m1 <= eps * np.maximum(scale, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(degenerate, np.inf, 100.0 * m2 / np.where(degenerate, 1.0, m1))
    return out, degenerate


@dataclass(frozen=True, eq=False)
class VufSeries:
    vuf: np.ndarray         # (T, n_bus) percent, nan where not three-phase
    degenerate: np.ndarray  # (T, n_bus)
    valid: np.ndarray       # (T, n_bus) counted in aggregates

    @property
    def per_time_max(self):
        return np.where(self.valid, self.vuf, -np.inf).max(axis=1)

    @property
    def mean(self):
        return float(self.vuf[self.valid].mean()) if self.valid.any() else float("nan")

    @property
    def max(self):
        return float(self.vuf[self.valid].max()) if self.valid.any() else float("nan")


def compute_vuf(state, phase_mask=None):
    """``state`` is a GridState or a (T, 3, n_bus) complex voltage array."""
    voltage = np.asarray(getattr(state, "voltage", state))
    if phase_mask is None:
        phase_mask = getattr(state, "phase_mask", np.ones(voltage.shape[-2:], dtype=bool))
    three = np.asarray(phase_mask).all(axis=0)
    vuf, degenerate = vuf_percent(voltage)
    vuf = np.where(three, vuf, np.nan)
    valid = three & ~degenerate
    if np.any(degenerate & three):
        log.warning("%d instance(s) with vanishing positive sequence excluded", int((degenerate & three).sum()))
    return VufSeries(vuf=vuf, degenerate=degenerate & three, valid=valid)


def reduction_percent(before, after):
    return 100.0 * (before - after) / before if before > 0 else 0.0


@dataclass(frozen=True)
class ParetoPoint:
    gv: float
    objective: float
    mean_vuf: float
    max_vuf: float
    incidents: int
    ok: bool = True
    error: str = ""


def pareto_sweep(model, profiles, fas, gated, nvs, tsens, limits, gv_grid, settings=None):
    """One full horizon dispatch per G_V value, in grid order."""
    grid = [float(g) for g in gv_grid]
    if not grid:
        raise ValueError("G_V grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("G_V grid must be strictly ascending")
    if grid[0] < 0:
        raise ValueError("G_V must be non-negative")
    points = []
    for gv in grid:
        try:
            res = activation.solve_horizon(model, profiles, fas, gated, nvs, tsens, limits, gv,
                                           settings=settings)
        except (activation.ActivationError, ArithmeticError, RuntimeError) as exc:
            log.error("G_V=%g failed: %s", gv, exc)
            points.append(ParetoPoint(gv, np.nan, np.nan, np.nan, -1, ok=False, error=str(exc)))
            continue
        vuf = compute_vuf(res.state)
        inc = scan_incidents(res.state, limits)
        points.append(ParetoPoint(gv, res.total_objective, vuf.mean, vuf.max, inc.hard_total,
                                  ok=res.feasible, error="; ".join(m for _, m in res.failures)))
    return points


def select_knee(points, fraction=0.8):
    """Smallest G_V reaching ``fraction`` of the largest mean-VUF reduction
    seen across the sweep, measured from the first grid point."""
    if len(points) < 3:
        raise ValueError("knee selection needs at least 3 points")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    pts = [p for p in points if np.isfinite(p.mean_vuf)]
    if not pts:
        raise ValueError("no successful sweep point")
    base = pts[0].mean_vuf
    red = np.array([base - p.mean_vuf for p in pts])
    best = red.max()
    if best <= 1e-12 * max(abs(base), 1.0):
        warnings.warn("flat sweep: no mean VUF reduction at any G_V", KneeWarning, stacklevel=2)
        return pts[0].gv
    idx = int(np.flatnonzero(red >= fraction * best)[0])
    if idx == len(pts) - 1:
        warnings.warn("knee not reached: the largest grid value was selected", KneeWarning, stacklevel=2)
    return pts[idx].gv
