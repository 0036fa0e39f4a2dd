"""Feeder description, profiles and operating limits.

Everything downstream works in per-unit on a per-phase base: ``v_base`` is
the slack bus phase-to-neutral voltage and ``s_base`` the per-phase apparent
power (kVA). Arrays indexed by phase always use the order A, B, C.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PHASES = "ABC"
DEFAULT_S_BASE_KVA = 100.0


class NetworkError(ValueError):
    """Invalid network, profile or limits input."""


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str
    is_slack: bool = False
    v_base: float = 230.0

    @property
    def mask(self):
        return np.array([p in self.phases for p in PHASES])


@dataclass(frozen=True, eq=False)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    z_ohm: np.ndarray  # (3, 3) complex
    ampacity: float    # A per phase
    s_max: float       # kVA per phase


@dataclass(frozen=True)
class Device:
    id: str
    bus: str
    connection: str  # "A", "B", "C" or "ABC"
    kind: str = "load"
    p_profile_ref: str = ""
    q_profile_ref: str = ""
    pv_capacity: float = 0.0  # kWp
    pv_phase: str = ""
    flex_p_max: float = 0.0   # kW, >= 0
    flex_p_min: float = 0.0   # kW, <= 0
    flex_q_max: float = 0.0   # kvar, >= 0
    flex_q_min: float = 0.0   # kvar, <= 0

    @property
    def three_phase(self):
        return self.connection == PHASES

    def phase_share(self):
        """Per-phase share of the device power, (3,)."""
        return np.array([1.0 / len(self.connection) if p in self.connection else 0.0
                         for p in PHASES])


@dataclass(frozen=True, eq=False)
class Topology:
    """Radial tree arrays consumed by the sweep kernels."""
    order: np.ndarray     # bus indices, slack first, parents before children
    parent: np.ndarray    # branch feeding each bus (-1 for slack)
    upstream: np.ndarray  # from-bus index of each branch
    downstream: np.ndarray
    path: np.ndarray      # (n_bus, n_branch) 1.0 where branch is on slack->bus route
    depth: np.ndarray


@dataclass(frozen=True, eq=False)
class NetworkModel:
    name: str
    buses: tuple
    branches: tuple
    devices: tuple
    s_base: float
    pv_profile_ref: str
    topology: Topology
    z_pu: np.ndarray        # (n_branch, 3, 3)
    s_max_pu: np.ndarray    # (n_branch,)
    phase_mask: np.ndarray  # (3, n_bus) bool

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def slack(self):
        return int(self.topology.order[0])

    @property
    def v_base(self):
        return self.buses[self.slack].v_base

    @property
    def z_base(self):
        return self.v_base ** 2 / (self.s_base * 1e3)

    @property
    def i_base(self):
        return self.s_base * 1e3 / self.v_base

    def bus_index(self, bus_id):
        return self._bus_lookup()[str(bus_id)]

    def _bus_lookup(self):
        return {b.id: k for k, b in enumerate(self.buses)}

    def three_phase_buses(self):
        return np.flatnonzero(self.phase_mask.all(axis=0))

    def device_mask(self):
        """(3, n_bus) True where at least one device connects to the phase."""
        mask = np.zeros((3, self.n_bus), dtype=bool)
        idx = self._bus_lookup()
        for dev in self.devices:
            mask[:, idx[dev.bus]] |= dev.phase_share() > 0
            if dev.pv_capacity > 0:
                mask[PHASES.index(dev.pv_phase), idx[dev.bus]] = True
        return mask

    def slack_phasors(self):
        return np.exp(1j * np.deg2rad([0.0, -120.0, 120.0])) * self.phase_mask[:, self.slack]

    def incident_branches(self, k):
        """Branches touching bus ``k``: its feeder branch then its children."""
        topo = self.topology
        out = [] if topo.parent[k] < 0 else [int(topo.parent[k])]
        out.extend(int(b) for b in np.flatnonzero(topo.upstream == k))
        return out

    def to_dict(self):
        return {
            "name": self.name,
            "s_base_kva": self.s_base,
            "pv_profile_ref": self.pv_profile_ref,
            "buses": [{"id": b.id, "phases": b.phases, "slack": b.is_slack,
                       "v_base": b.v_base} for b in self.buses],
            "branches": [{"id": br.id, "from": br.from_bus, "to": br.to_bus,
                          "r_ohm": br.z_ohm.real.tolist(), "x_ohm": br.z_ohm.imag.tolist(),
                          "ampacity_a": br.ampacity, "s_max_kva": br.s_max}
                         for br in self.branches],
            "devices": [{"id": d.id, "bus": d.bus, "connection": d.connection,
                         "kind": d.kind, "p_profile_ref": d.p_profile_ref,
                         "q_profile_ref": d.q_profile_ref, "pv_capacity_kwp": d.pv_capacity,
                         "pv_phase": d.pv_phase, "flex_p_max_kw": d.flex_p_max,
                         "flex_p_min_kw": d.flex_p_min, "flex_q_max_kvar": d.flex_q_max,
                         "flex_q_min_kvar": d.flex_q_min} for d in self.devices],
        }


def _parse_phases(text, where):
    phases = "".join(p for p in PHASES if p in str(text).upper())
    if not phases or len(phases) != len(str(text).strip()):
        raise NetworkError(f"{where}: invalid phase set {text!r}")
    return phases


def _build_topology(buses, branches):
    idx = {b.id: k for k, b in enumerate(buses)}
    slack = next(k for k, b in enumerate(buses) if b.is_slack)
    adj = {k: [] for k in range(len(buses))}
    for n, br in enumerate(branches):
        adj[idx[br.from_bus]].append((n, idx[br.to_bus]))
        adj[idx[br.to_bus]].append((n, idx[br.from_bus]))
    parent = np.full(len(buses), -1, dtype=np.int64)
    upstream = np.zeros(len(branches), dtype=np.int64)
    downstream = np.zeros(len(branches), dtype=np.int64)
    depth = np.zeros(len(buses), dtype=np.int64)
    seen = {slack}
    order = [slack]
    queue = deque([slack])
    while queue:
        k = queue.popleft()
        for n, other in sorted(adj[k], key=lambda e: e[1]):
            if other in seen:
                continue
            seen.add(other)
            parent[other] = n
            upstream[n] = k
            downstream[n] = other
            depth[other] = depth[k] + 1
            order.append(other)
            queue.append(other)
    if len(seen) != len(buses):
        missing = sorted(buses[k].id for k in set(range(len(buses))) - seen)
        raise NetworkError(f"islanded bus(es) not connected to slack: {missing}")
    if len(branches) != len(buses) - 1:
        raise NetworkError(f"network is not radial: {len(buses)} buses, {len(branches)} branches")
    path = np.zeros((len(buses), len(branches)))
    for k in order[1:]:
        path[k] = path[upstream[parent[k]]]
        path[k, parent[k]] = 1.0
    return Topology(order=_frozen(np.array(order, dtype=np.int64)), parent=_frozen(parent),
                    upstream=_frozen(upstream), downstream=_frozen(downstream),
                    path=_frozen(path), depth=_frozen(depth))


def build_network(data, s_base_kva=None):
    """Validate a network mapping (the JSON document) and return the model."""
    buses = []
    seen = set()
    for raw in data.get("buses", []):
        bid = str(raw["id"])
        if bid in seen:
            raise NetworkError(f"duplicate bus id {bid!r}")
        seen.add(bid)
        buses.append(Bus(id=bid, phases=_parse_phases(raw.get("phases", PHASES), f"bus {bid}"),
                         is_slack=bool(raw.get("slack", False)),
                         v_base=float(raw.get("v_base", 230.0))))
    if not buses:
        raise NetworkError("network has no buses")
    n_slack = sum(b.is_slack for b in buses)
    if n_slack == 0:
        raise NetworkError("no slack bus")
    if n_slack > 1:
        raise NetworkError(f"multiple slack buses ({n_slack})")
    by_id = {b.id: b for b in buses}

    branches = []
    seen_br = set()
    for n, raw in enumerate(data.get("branches", [])):
        brid = str(raw.get("id", f"br{n}"))
        if brid in seen_br:
            raise NetworkError(f"duplicate branch id {brid!r}")
        seen_br.add(brid)
        f, t = str(raw["from"]), str(raw["to"])
        for end in (f, t):
            if end not in by_id:
                raise NetworkError(f"branch {brid} references unknown bus {end!r}")
        z = np.asarray(raw["r_ohm"], float) + 1j * np.asarray(raw["x_ohm"], float)
        if z.shape != (3, 3):
            raise NetworkError(f"branch {brid}: impedance must be 3x3")
        if not np.allclose(z, z.T, rtol=0, atol=1e-12 * max(1.0, np.abs(z).max())):
            raise NetworkError(f"branch {brid}: impedance matrix not symmetric")
        present = np.array([p in by_id[f].phases and p in by_id[t].phases for p in PHASES])
        if np.any(np.abs(z[~present, :]) > 0) or np.any(np.abs(z[:, ~present]) > 0):
            raise NetworkError(f"branch {brid}: nonzero impedance on absent phase")
        if np.any(z.real.diagonal()[present] <= 0):
            raise NetworkError(f"branch {brid}: diagonal resistance must be positive")
        amp = float(raw.get("ampacity_a", 0.0))
        if amp <= 0:
            raise NetworkError(f"branch {brid}: ampacity must be positive")
        s_max = float(raw.get("s_max_kva", amp * by_id[f].v_base / 1e3))
        if s_max <= 0:
            raise NetworkError(f"branch {brid}: s_max must be positive")
        z.setflags(write=False)
        branches.append(Branch(id=brid, from_bus=f, to_bus=t, z_ohm=z, ampacity=amp, s_max=s_max))

    topo = _build_topology(buses, branches)
    # orient every branch upstream -> downstream
    oriented = []
    for n, br in enumerate(branches):
        if buses[topo.upstream[n]].id != br.from_bus:
            br = Branch(id=br.id, from_bus=br.to_bus, to_bus=br.from_bus, z_ohm=br.z_ohm,
                        ampacity=br.ampacity, s_max=br.s_max)
        if not set(by_id[br.to_bus].phases) <= set(by_id[br.from_bus].phases):
            raise NetworkError(f"bus {br.to_bus} carries phases missing upstream at {br.from_bus}")
        oriented.append(br)

    devices = []
    seen_dev = set()
    for raw in data.get("devices", []):
        did = str(raw["id"])
        if did in seen_dev:
            raise NetworkError(f"duplicate device id {did!r}")
        seen_dev.add(did)
        bus = str(raw["bus"])
        if bus not in by_id:
            raise NetworkError(f"device {did} on unknown bus {bus!r}")
        conn = _parse_phases(raw.get("connection", PHASES), f"device {did}")
        if len(conn) not in (1, 3):
            raise NetworkError(f"device {did}: connection must be one phase or ABC")
        missing = set(conn) - set(by_id[bus].phases)
        if missing:
            raise NetworkError(f"device {did} on absent phase {''.join(sorted(missing))} of bus {bus}")
        kind = raw.get("kind", "load")
        if kind not in ("load", "generator"):
            raise NetworkError(f"device {did}: kind must be load or generator")
        pv = float(raw.get("pv_capacity_kwp", 0.0))
        pv_phase = str(raw.get("pv_phase", "") or (conn[0] if pv > 0 else ""))
        if pv < 0:
            raise NetworkError(f"device {did}: negative pv capacity")
        if pv > 0 and (pv_phase not in PHASES or pv_phase not in by_id[bus].phases):
            raise NetworkError(f"device {did}: pv on absent phase {pv_phase!r}")
        dev = Device(id=did, bus=bus, connection=conn, kind=kind,
                     p_profile_ref=str(raw.get("p_profile_ref") or did),
                     q_profile_ref=str(raw.get("q_profile_ref") or raw.get("p_profile_ref") or did),
                     pv_capacity=pv, pv_phase=pv_phase,
                     flex_p_max=float(raw.get("flex_p_max_kw", 0.0)),
                     flex_p_min=float(raw.get("flex_p_min_kw", 0.0)),
                     flex_q_max=float(raw.get("flex_q_max_kvar", 0.0)),
                     flex_q_min=float(raw.get("flex_q_min_kvar", 0.0)))
        if dev.flex_p_max < 0 or dev.flex_p_min > 0 or dev.flex_q_max < 0 or dev.flex_q_min > 0:
            raise NetworkError(f"device {did}: flexibility bounds have wrong sign")
        devices.append(dev)

    s_base = float(s_base_kva or data.get("s_base_kva", DEFAULT_S_BASE_KVA))
    slack = int(topo.order[0])
    v_base = buses[slack].v_base
    z_base = v_base ** 2 / (s_base * 1e3)
    phase_mask = np.array([[p in b.phases for b in buses] for p in PHASES])
    return NetworkModel(
        name=str(data.get("name", "feeder")),
        buses=tuple(buses), branches=tuple(oriented), devices=tuple(devices),
        s_base=s_base, pv_profile_ref=str(data.get("pv_profile_ref", "pv")),
        topology=topo,
        z_pu=_frozen(np.array([br.z_ohm for br in oriented]).reshape(-1, 3, 3) / z_base),
        s_max_pu=_frozen(np.array([br.s_max for br in oriented]) / s_base),
        phase_mask=_frozen(phase_mask),
    )


def load_network(path, s_base_kva=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkError(f"cannot read network file {path}: {exc}") from exc
    return build_network(data, s_base_kva=s_base_kva)


def dump_network(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


@dataclass(frozen=True, eq=False)
class ProfileSet:
    """Device time series in kW / kvar, load convention (negative = injection)."""
    T: int
    step_minutes: float
    p: dict  # device id -> (T,) kW
    q: dict  # device id -> (T,) kvar
    pv_shape: np.ndarray = field(default_factory=lambda: np.zeros(0))  # kW per kWp

    def per_phase(self, model):
        """Split device series onto phases.

        Returns ``(demand, generation, q)``, each (T, 3, n_bus) in per-unit;
        demand and generation are non-negative.
        """
        idx = model._bus_lookup()
        demand = np.zeros((self.T, 3, model.n_bus))
        gen = np.zeros_like(demand)
        q = np.zeros_like(demand)
        for dev in model.devices:
            k = idx[dev.bus]
            share = dev.phase_share()
            p = self.p[dev.id] / model.s_base
            demand[:, :, k] += np.maximum(p, 0.0)[:, None] * share
            gen[:, :, k] += np.maximum(-p, 0.0)[:, None] * share
            q[:, :, k] += (self.q[dev.id] / model.s_base)[:, None] * share
            if dev.pv_capacity > 0:
                gen[:, PHASES.index(dev.pv_phase), k] += dev.pv_capacity * self.pv_shape / model.s_base
        return demand, gen, q

    def net_load(self, model):
        """(T, 3, n_bus) complex per-unit net load."""
        demand, gen, q = self.per_phase(model)
        return (demand - gen) + 1j * q


def load_profiles(path, model, step_minutes=60.0):
    """Read the long-format CSV ``device_id,t,p_kw,q_kvar``."""
    path = Path(path)
    series = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"device_id", "t", "p_kw", "q_kvar"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise NetworkError(f"{path}: header must contain {sorted(need)}")
            for row in reader:
                pid = row["device_id"].strip()
                t = int(row["t"])
                p, q = float(row["p_kw"]), float(row["q_kvar"])
                if not (math.isfinite(p) and math.isfinite(q)):
                    raise NetworkError(f"{path}: non-finite value for {pid} at t={t}")
                series.setdefault(pid, {})[t] = (p, q)
    except OSError as exc:
        raise NetworkError(f"cannot read profiles {path}: {exc}") from exc
    return build_profiles(series, model, step_minutes=step_minutes)


def build_profiles(series, model, step_minutes=60.0):
    """``series`` maps profile id -> {t: (p_kw, q_kvar)}."""
    needed = set()
    for dev in model.devices:
        needed.update((dev.p_profile_ref, dev.q_profile_ref))
    if any(d.pv_capacity > 0 for d in model.devices):
        needed.add(model.pv_profile_ref)
    missing = sorted(needed - set(series))
    if missing:
        raise NetworkError(f"missing profile(s): {missing}")
    T = None
    arrays = {}
    for pid in sorted(needed):
        steps = series[pid]
        if sorted(steps) != list(range(len(steps))):
            raise NetworkError(f"profile {pid}: time steps must be 0..T-1")
        if T is None:
            T = len(steps)
        elif len(steps) != T:
            raise NetworkError(f"profile {pid}: length mismatch ({len(steps)} != {T})")
        arrays[pid] = np.array([steps[t] for t in range(T)], dtype=float).reshape(T, 2)
    if T is None or T == 0:
        raise NetworkError("no time steps")
    for pid in sorted(set(series) - needed):
        log.warning("profile %s is not referenced by any device; ignored", pid)
    p = {d.id: _frozen(arrays[d.p_profile_ref][:, 0].copy()) for d in model.devices}
    q = {d.id: _frozen(arrays[d.q_profile_ref][:, 1].copy()) for d in model.devices}
    pv = arrays[model.pv_profile_ref][:, 0].copy() if model.pv_profile_ref in arrays else np.zeros(T)
    return ProfileSet(T=T, step_minutes=float(step_minutes), p=p, q=q, pv_shape=_frozen(pv))


@dataclass(frozen=True)
class OperatingLimits:
    v_min: float = 0.90
    v_max: float = 1.10
    dv_perm_lo: float = 0.04
    dv_perm_hi: float = 0.03
    dt_perm: float = 80.0
    curt_price_p: float | None = None  # None: derived from the signal field
    curt_price_g: float | None = None

    def __post_init__(self):
        if not (0 < self.v_min < 1 - self.dv_perm_lo < 1 < 1 + self.dv_perm_hi < self.v_max):
            raise NetworkError("limits must satisfy 0 < v_min < 1-dv_lo < 1 < 1+dv_hi < v_max")
        if not 0 < self.dt_perm < 100:
            raise NetworkError("dt_perm must lie in (0, 100)")
        for price in (self.curt_price_p, self.curt_price_g):
            if price is not None and price <= 0:
                raise NetworkError("curtailment prices must be positive")

    @classmethod
    def from_dict(cls, data):
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in keys})


@dataclass(frozen=True, eq=False)
class FlexLimits:
    """Raw flexibility ranges per (t, phase, bus) in per-unit."""
    p_max: np.ndarray
    p_min: np.ndarray
    q_max: np.ndarray
    q_min: np.ndarray


def flex_limits(model, T):
    idx = model._bus_lookup()
    lim = np.zeros((4, 3, model.n_bus))
    for dev in model.devices:
        share = dev.phase_share()
        k = idx[dev.bus]
        lim[0, :, k] += dev.flex_p_max * share
        lim[1, :, k] += dev.flex_p_min * share
        lim[2, :, k] += dev.flex_q_max * share
        lim[3, :, k] += dev.flex_q_min * share
    lim /= model.s_base
    full = np.broadcast_to(lim[:, None], (4, T, 3, model.n_bus))
    return FlexLimits(*(_frozen(full[i].copy()) for i in range(4)))
