import csv
import json

import numpy as np
import pytest

from flexact import netmodel
from flexact.config import Settings, load_settings
from flexact.pipeline import Pipeline

# per-km line data used by the small hand-built feeders
R_KM, X_KM = 0.32, 0.047


def kron(length_m, r_km=R_KM, x_km=X_KM, phases="ABC"):
    """3x3 (r, x) lists with an isolated neutral folded into the phases."""
    z = np.zeros((3, 3), dtype=complex)
    idx = ["ABC".index(p) for p in phases]
    base = (r_km + 1j * x_km) * length_m / 1e3
    for i in idx:
        for j in idx:
            z[i, j] = 2 * base if i == j else base
    return z.real.tolist(), z.imag.tolist()


def branch(bid, f, t, length_m=30.0, amp=240.0, phases="ABC", **kw):
    r, x = kron(length_m, phases=phases)
    return {"id": bid, "from": f, "to": t, "r_ohm": r, "x_ohm": x, "ampacity_a": amp, **kw}


def two_bus(r_ohm, x_ohm, amp=200.0):
    """Slack plus one single-phase bus fed on phase A."""
    zr = np.zeros((3, 3))
    zx = np.zeros((3, 3))
    zr[0, 0], zx[0, 0] = r_ohm, x_ohm
    data = {"buses": [{"id": "s", "phases": "ABC", "slack": True}, {"id": "n", "phases": "A"}],
            "branches": [{"id": "l", "from": "s", "to": "n", "r_ohm": zr.tolist(),
                          "x_ohm": zx.tolist(), "ampacity_a": amp}],
            "devices": [{"id": "d", "bus": "n", "connection": "A"}]}
    return netmodel.build_network(data)


def chain(n=4, length_m=40.0, devices=None, amp=240.0):
    """Three-phase chain slack-1-...-n, one device per listed (bus, connection)."""
    buses = [{"id": "0", "phases": "ABC", "slack": True}]
    buses += [{"id": str(k), "phases": "ABC"} for k in range(1, n + 1)]
    branches = [branch(f"b{k}", str(k - 1), str(k), length_m, amp) for k in range(1, n + 1)]
    devices = devices if devices is not None else [
        {"id": f"d{k}", "bus": str(k), "connection": "ABC"} for k in range(1, n + 1)]
    return netmodel.build_network({"buses": buses, "branches": branches, "devices": devices})


def twin_laterals():
    """Busbar 1 with two identical two-bus laterals (2-3 and 4-5)."""
    buses = [{"id": str(k), "phases": "ABC", "slack": k == 0} for k in range(6)]
    branches = [branch("b1", "0", "1", 10.0, 600.0), branch("b2", "1", "2"), branch("b3", "2", "3"),
                branch("b4", "1", "4"), branch("b5", "4", "5")]
    devices = [{"id": f"d{k}", "bus": str(k), "connection": "ABC"} for k in (2, 3, 4, 5)]
    return netmodel.build_network({"buses": buses, "branches": branches, "devices": devices})


def balanced_load(model, kw_per_phase, kvar_per_phase=0.0, buses=None):
    """(3, n_bus) complex per-unit load with the same value on every phase."""
    s = np.zeros((3, model.n_bus), dtype=complex)
    idx = range(model.n_bus) if buses is None else [model.bus_index(b) for b in buses]
    for k in idx:
        if k != model.slack:
            s[:, k] = (kw_per_phase + 1j * kvar_per_phase) / model.s_base
    return s


def write_case(folder, n, loads, flex_kw, length_m=60.0, pv_kwp=0.0, pv_shape=None):
    """Write a balanced n-bus chain and its profiles; every bus hosts one
    three-phase device drawing ``loads[t]`` kW with symmetric P flexibility."""
    buses = [{"id": str(k), "phases": "ABC", "slack": k == 0} for k in range(n + 1)]
    branches = [branch(f"b{k}", str(k - 1), str(k), length_m) for k in range(1, n + 1)]
    devices = []
    for k in range(1, n + 1):
        dev = {"id": f"d{k}", "bus": str(k), "connection": "ABC",
               "flex_p_max_kw": flex_kw, "flex_p_min_kw": -flex_kw}
        if pv_kwp:
            dev.update(pv_capacity_kwp=pv_kwp, pv_phase="A")
        devices.append(dev)
    net, prof = folder / "net.json", folder / "profiles.csv"
    net.write_text(json.dumps({"buses": buses, "branches": branches, "devices": devices}))
    with prof.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "t", "p_kw", "q_kvar"])
        for k in range(1, n + 1):
            w.writerows([f"d{k}", t, p, 0.0] for t, p in enumerate(loads))
        if pv_kwp:
            w.writerows(["pv", t, s, 0.0] for t, s in enumerate(pv_shape))
    return net, prof


def case_pipeline(folder, *args, **kw):
    net, prof = write_case(folder, *args, **kw)
    return Pipeline(Settings(network=net, profiles=prof))


@pytest.fixture(scope="session")
def pipe():
    """The bundled 41-bus fixture with the default configuration."""
    return Pipeline(load_settings())


@pytest.fixture(scope="session")
def corrected(pipe):
    return pipe.activate()


@pytest.fixture(scope="session")
def sweep(pipe):
    return pipe.pareto()


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
