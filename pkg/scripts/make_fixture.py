"""Generate the bundled 41-bus LV feeder fixture.

Writes ``feeder41.json``, ``profiles41.csv`` and ``config41.json`` into
``src/flexact/data``. Output is deterministic (fixed seed); rerun after
changing any parameter below.

Topology: slack 0 -> busbar 1 -> three radial feeders. 18 consumers sit on
the buses and phases listed in ``CONSUMERS`` (16 single-phase, 2 balanced
three-phase, devices 9 and 10 share bus 25). Every consumer has 10 kWp of
single-phase PV except device 10; the three-phase consumers put theirs on
phase A.
"""

import argparse
import csv
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "flexact" / "data"

V_BASE = 230.0
HOURS = 24
EVENING = 0.7
PV_PEAK = 0.95

# (device, bus, connection, net daily energy in kWh summed over its phases)
CONSUMERS = [
    (0, 4, "A", -0.071), (1, 6, "B", 5.120), (2, 8, "B", 9.684),
    (3, 10, "A", 131.88), (4, 11, "A", 19.13), (5, 15, "C", 50.90),
    (6, 17, "A", -18.28), (7, 19, "C", -0.198), (8, 23, "B", -0.206),
    (9, 25, "C", -3.496), (10, 25, "C", -3.496), (11, 27, "C", -0.941),
    (12, 30, "A", 184.7), (13, 32, "B", 48.59), (14, 34, "C", 19.593),
    (15, 36, "ABC", 25.71), (16, 38, "A", 24.96), (17, 40, "ABC", 131.765),
]

FEEDERS = {
    # name: (bus chain after busbar 1, segment length m, r ohm/km, x ohm/km, ampacity A)
    "f1": (list(range(2, 9)), 30.0, 0.320, 0.047, 240.0),
    "f2": (list(range(9, 20)), 28.0, 0.320, 0.047, 240.0),
    "f3": (list(range(20, 41)), 34.0, 0.320, 0.047, 240.0),
}
BUSBAR = (0, 1, 10.0, 0.060, 0.009, 900.0)
# weak section: (from, to, ampacity A)
WEAK = [(1, 20, 125.0)]


def kron_matrix(r_km, x_km, length_m):
    """3x3 phase impedance after eliminating an isolated neutral of the same
    conductor: self = phase + neutral, mutual = neutral."""
    z = (r_km + 1j * x_km) * length_m / 1e3
    return np.array([[2 * z, z, z], [z, 2 * z, z], [z, z, 2 * z]])


def load_shape(rng, evening=1.0):
    h = np.arange(HOURS) + 0.5
    base = (0.35 + 0.45 * np.exp(-0.5 * ((h - 7.5) / 1.3) ** 2)
            + 0.30 * np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
            + evening * EVENING * np.exp(-0.5 * ((h - 19.5) / 1.8) ** 2))
    base *= 1.0 + 0.08 * rng.standard_normal(HOURS)
    return np.clip(base, 0.05, None) / base.mean()


def pv_shape():
    h = np.arange(HOURS) + 0.5
    s = np.sin(np.pi * (h - 5.5) / 15.0)
    return np.round(np.where((h > 5.5) & (h < 20.5), PV_PEAK * np.clip(s, 0, None) ** 1.4, 0.0), 6)


def build(flex_share=0.6, flex_3ph_kw=12.0, seed=7):
    rng = np.random.default_rng(seed)
    buses = [{"id": str(k), "phases": "ABC", "slack": k == 0, "v_base": V_BASE} for k in range(41)]
    weak = {(f, t): a for f, t, a in WEAK}
    branches = []

    def add(f, t, length, r, x, amp):
        amp = weak.get((f, t), amp)
        z = kron_matrix(r, x, length)
        branches.append({"id": f"L{f}-{t}", "from": str(f), "to": str(t),
                         "r_ohm": np.round(z.real, 9).tolist(), "x_ohm": np.round(z.imag, 9).tolist(),
                         "ampacity_a": amp, "s_max_kva": round(amp * V_BASE / 1e3, 6)})

    add(*BUSBAR)
    for chain, length, r, x, amp in FEEDERS.values():
        prev = 1
        for k in chain:
            add(prev, k, length, r, x, amp)
            prev = k

    pv = pv_shape()
    pv_energy = pv.sum()
    devices, rows = [], []
    for dev, bus, conn, e_net in CONSUMERS:
        did = f"dev{dev}"
        cap = 0.0 if dev == 10 else 10.0
        n_ph = len(conn)
        # gross load energy so that load - own PV reproduces the net figure
        e_load = max(e_net + cap * pv_energy, 2.0)
        shape = load_shape(rng, evening=1.0 + 0.3 * rng.random())
        p = e_load * shape / HOURS
        q = 0.2 * p
        peak = p.max() / n_ph
        if n_ph == 3:
            span = flex_3ph_kw
        else:
            span = round(flex_share * peak, 3)
        devices.append({"id": did, "bus": str(bus), "connection": conn, "kind": "load",
                        "pv_capacity_kwp": cap, "pv_phase": ("A" if n_ph == 3 else conn) if cap else "",
                        "flex_p_max_kw": span, "flex_p_min_kw": -span,
                        "flex_q_max_kvar": 0.0, "flex_q_min_kvar": 0.0})
        for t in range(HOURS):
            rows.append((did, t, round(float(p[t]), 6), round(float(q[t]), 6)))
    for t in range(HOURS):
        rows.append(("pv", t, float(pv[t]), 0.0))
    network = {"name": "lv-feeder-41", "s_base_kva": 100.0, "pv_profile_ref": "pv",
               "buses": buses, "branches": branches, "devices": devices}
    return network, rows


CONFIG = {
    "network": "feeder41.json",
    "profiles": "profiles41.csv",
    "step_minutes": 60,
    "limits": {"v_min": 0.90, "v_max": 1.10, "dv_perm_lo": 0.04, "dv_perm_hi": 0.03, "dt_perm": 80.0},
    "sensitivity": {"levels": [0.001, 0.002, 0.005], "reference": "mean"},
    "fas": {"kappa_v": 1.0, "kappa_t": 1.0, "thermal_mirror": "even",
            "imb_sign_normalized": True, "weighted_current": False},
    # gv from the knee of the bundled sweep (flexact pareto)
    "activation": {"gv": 0.05, "trust": 0.2, "max_iter": 15, "backend": "simplex"},
    "pareto": {"grid": [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0], "knee_fraction": 0.8},
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args(argv)
    network, rows = build()
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "feeder41.json").write_text(json.dumps(network, indent=1))
    with (args.out / "profiles41.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "t", "p_kw", "q_kvar"])
        w.writerows(rows)
    (args.out / "config41.json").write_text(json.dumps(CONFIG, indent=1) + "\n")
    print(f"wrote fixture to {args.out}")


if __name__ == "__main__":
    main()
