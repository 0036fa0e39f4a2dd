"""Command line entry point: ``flexact {pf,nvs,fas,activate,pareto,report}``.

Exit codes: 0 success, 1 configuration or usage error, 2 solver failure,
3 dispatch could not meet the hard limits. Errors go to stderr as one JSON
object per line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from flexact import lp, metrics
from flexact.activation import ActivationError
from flexact.config import ConfigError, load_settings
from flexact.fas import CHANNELS, FasError
from flexact.netmodel import PHASES, NetworkError
from flexact.pipeline import Pipeline
from flexact.powerflow import PowerFlowError, scan_incidents
from flexact.sensitivity import SensitivityError

log = logging.getLogger("flexact")

OUTPUT_ENV = "FLEXACT_OUTPUT_DIR"
EXIT_CONFIG, EXIT_SOLVER, EXIT_INFEASIBLE = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x) + 0.0:.9g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _bus_phase_rows(model):
    """(bus index, phase index) in output order: bus then phase."""
    for k in range(model.n_bus):
        for p in range(3):
            if model.phase_mask[p, k]:
                yield k, p


def _voltage_rows(model, state):
    vm, ang = state.V, np.rad2deg(state.theta)
    for t in range(state.T):
        for k, p in _bus_phase_rows(model):
            yield t, model.buses[k].id, PHASES[p], vm[t, p, k], ang[t, p, k]


def _incident_rows(report):
    keys = ("under_voltage", "below_soft", "over_voltage", "above_soft", "thermal_overload")
    for key in keys:
        yield key, report.labels[key], report.counts[key], report.percent(key)


def cmd_pf(pipe, out, args):
    model, state = pipe.model, pipe.base_state
    write_csv(out / "voltages_uncorrected.csv", ["t", "bus", "phase", "v_pu", "angle_deg"],
              _voltage_rows(model, state))
    rows = []
    for t in range(state.T):
        for b, br in enumerate(model.branches):
            for p in range(3):
                if state.branch_mask[p, b]:
                    rows.append((t, br.id, PHASES[p], state.loading[t, p, b], int(state.flow_sign[t, p, b])))
    write_csv(out / "loading_uncorrected.csv", ["t", "branch", "phase", "loading_pct", "flow_sign"], rows)
    rep = scan_incidents(state, pipe.limits)
    write_csv(out / "incidents_uncorrected.csv", ["key", "label", "count", "percent"], _incident_rows(rep))
    return {"incidents": rep.counts, "denominator": rep.denominator}


def cmd_nvs(pipe, out, args):
    model, nvs = pipe.model, pipe.nvs
    rows = []
    pert = [(k, p) for k, p in _bus_phase_rows(model) if nvs.perturbed[p, k]]
    for k, p in _bus_phase_rows(model):
        for kk, pp in pert:
            rows.append((model.buses[k].id, PHASES[p], model.buses[kk].id, PHASES[pp],
                         nvs.nvs_p[p, k, pp, kk], nvs.nvs_q[p, k, pp, kk]))
    write_csv(out / "nvs.csv", ["obs_bus", "obs_phase", "pert_bus", "pert_phase", "nvs_p", "nvs_q"], rows)
    return {"levels": list(nvs.levels), "perturbed": len(pert)}


def cmd_fas(pipe, out, args):
    model, f = pipe.model, pipe.fas
    c = f.components
    volt = c["voltage"]["p_up"] + c["voltage"]["p_dn"]
    th = c["thermal"]["p_up"]
    imb = c["imbalance"]["p_up"] + c["imbalance"]["p_dn"]
    rows = []
    for t in range(f.T):
        for k, p in _bus_phase_rows(model):
            rows.append((t, model.buses[k].id, PHASES[p], *(getattr(f, ch)[t, p, k] for ch in CHANNELS),
                         volt[t, p, k], th[t, p, k], imb[t, p, k]))
    write_csv(out / "fas.csv", ["t", "bus", "phase", "lam_p_up", "lam_p_dn", "lam_q_up", "lam_q_dn",
                                "volt_comp", "th_comp", "imb_comp"], rows)
    return {"max_abs": f.max_abs}


def _activation_rows(model, res):
    kw = model.s_base
    for t in range(res.dp_up.shape[0]):
        for k, p in _bus_phase_rows(model):
            vals = [getattr(res, n)[t, p, k] for n in ("dp_up", "dp_dn", "dq_up", "dq_dn", "p_curt", "g_curt")]
            if any(abs(v) > 0 for v in vals):
                yield (t, model.buses[k].id, PHASES[p], *(kw * v for v in vals))


def cmd_activate(pipe, out, args):
    model = pipe.model
    res = pipe.activate()
    write_csv(out / "activation.csv", ["t", "bus", "phase", "dp_up", "dp_dn", "dq_up", "dq_dn",
                                       "p_curt", "g_curt"], _activation_rows(model, res))
    rep = scan_incidents(res.state, pipe.limits)
    write_csv(out / "incidents_corrected.csv", ["key", "label", "count", "percent"], _incident_rows(rep))
    write_csv(out / "voltages_corrected.csv", ["t", "bus", "phase", "v_pu", "angle_deg"],
              _voltage_rows(model, res.state))
    summary = {"gv": pipe.settings.gv, "objective": float(fmt(res.total_objective)),
               "incidents": rep.counts, "failures": [t for t, _ in res.failures]}
    if not res.feasible:
        raise _Infeasible(summary)
    return summary


def cmd_pareto(pipe, out, args):
    points = pipe.pareto()
    write_csv(out / "pareto.csv", ["gv", "objective", "mean_vuf", "max_vuf", "incidents"],
              ((p.gv, p.objective, p.mean_vuf, p.max_vuf, p.incidents) for p in points))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", metrics.KneeWarning)
        knee = metrics.select_knee(points, pipe.settings.knee_fraction) if len(points) >= 3 else None
    return {"chosen_gv": knee, "notes": [str(w.message) for w in caught],
            "failed": [p.gv for p in points if not p.ok]}


def cmd_report(pipe, out, args):
    before = pipe.base_state
    res = pipe.activate()
    rb, ra = scan_incidents(before, pipe.limits), scan_incidents(res.state, pipe.limits)
    vb, va = metrics.compute_vuf(before), metrics.compute_vuf(res.state)
    rows = [(label, rb.counts[key], rb.percent(key), ra.counts[key], ra.percent(key))
            for key, label, _, _ in _incident_rows(rb)]
    rows.append(("Mean VUF (%)", vb.mean, "", va.mean, ""))
    rows.append(("Max VUF (%)", vb.max, "", va.max, ""))
    write_csv(out / "report.csv", ["metric", "uncorrected", "uncorrected_pct", "corrected", "corrected_pct"], rows)
    series = zip(range(before.T), vb.per_time_max, va.per_time_max,
                 np.nanmean(np.where(vb.valid, vb.vuf, np.nan), axis=1),
                 np.nanmean(np.where(va.valid, va.vuf, np.nan), axis=1))
    write_csv(out / "vuf_series.csv", ["t", "max_vuf_uncorrected", "max_vuf_corrected",
                                       "mean_vuf_uncorrected", "mean_vuf_corrected"], series)
    write_csv(out / "activation.csv", ["t", "bus", "phase", "dp_up", "dp_dn", "dq_up", "dq_dn",
                                       "p_curt", "g_curt"], _activation_rows(pipe.model, res))
    width = max(len(r[0]) for r in rows)
    print(f"{'':{width}}  {'uncorrected':>18}  {'corrected':>18}")
    for label, c0, p0, c1, p1 in rows:
        left = f"{fmt(c0)} ({p0:.2f}%)" if p0 != "" else fmt(round(c0, 4))
        right = f"{fmt(c1)} ({p1:.2f}%)" if p1 != "" else fmt(round(c1, 4))
        print(f"{label:{width}}  {left:>18}  {right:>18}")
    summary = {"gv": pipe.settings.gv, "hard_before": rb.hard_total, "hard_after": ra.hard_total,
               "mean_vuf_reduction_pct": float(fmt(metrics.reduction_percent(vb.mean, va.mean))),
               "max_vuf_reduction_pct": float(fmt(metrics.reduction_percent(vb.max, va.max)))}
    if not res.feasible:
        raise _Infeasible(summary)
    return summary


class _Infeasible(Exception):
    def __init__(self, summary):
        super().__init__("dispatch did not meet the hard limits")
        self.summary = summary


COMMANDS = {"pf": (cmd_pf, "solve the uncorrected power flow and count incidents"),
            "nvs": (cmd_nvs, "perturb-and-observe voltage sensitivities"),
            "fas": (cmd_fas, "flexibility activation signals"),
            "activate": (cmd_activate, "dispatch flexibility for every step"),
            "pareto": (cmd_pareto, "sweep the imbalance gain and pick the knee"),
            "report": (cmd_report, "before/after incident and VUF summary")}


def build_parser():
    ap = _Parser(prog="flexact", description="Flexibility activation on unbalanced LV feeders.")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="JSON run configuration (default: bundled fixture)")
        p.add_argument("--network", type=Path)
        p.add_argument("--profiles", type=Path)
        p.add_argument("--out", type=Path, help=f"output directory (env {OUTPUT_ENV}, default ./flexact-out)")
        p.add_argument("--backend", choices=sorted(lp.BACKENDS))
        p.add_argument("--imb-sign-normalized", dest="imb_sign_normalized", action="store_true", default=None)
        p.add_argument("--imb-literal", dest="imb_sign_normalized", action="store_false")
        p.add_argument("--weighted-current", action="store_true", default=None)
        p.add_argument("--thermal-mirror", choices=("even", "odd"))
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("activate", "report", "pareto"):
            p.add_argument("--trust", type=float)
            p.add_argument("--max-iter", type=int)
        if name in ("activate", "report"):
            p.add_argument("--gv", type=float)
        if name == "pareto":
            p.add_argument("--grid", type=lambda s: tuple(float(x) for x in s.split(",")),
                           help="comma separated ascending G_V values")
    return ap


def _emit_error(kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args.config).with_overrides(
            network=args.network, profiles=args.profiles, backend=args.backend,
            imb_sign_normalized=args.imb_sign_normalized, weighted_current=args.weighted_current,
            thermal_mirror=args.thermal_mirror, trust=getattr(args, "trust", None),
            max_iter=getattr(args, "max_iter", None), gv=getattr(args, "gv", None),
            grid=getattr(args, "grid", None))
        out = args.out or Path(os.environ.get(OUTPUT_ENV) or "flexact-out")
        out.mkdir(parents=True, exist_ok=True)
        pipe = Pipeline(settings)
        _ = pipe.profiles  # read inputs first so bad files map to exit 1
        summary = COMMANDS[args.command][0](pipe, out, args)
    except (ConfigError, NetworkError, FasError, ValueError, OSError) as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except _Infeasible as exc:
        _emit_error("infeasible", str(exc), summary=exc.summary)
        return EXIT_INFEASIBLE
    except (PowerFlowError, SensitivityError, ActivationError, lp.LPError) as exc:
        _emit_error("solver", str(exc))
        return EXIT_SOLVER
    print(json.dumps(summary, sort_keys=True))
    return 0


def main():
    sys.exit(run())
