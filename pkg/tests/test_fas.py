import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexact import fas
from flexact.fas import (CHANNELS, FasError, combine, flow_direction, imbalance_component,
                         imbalance_metrics, project_current, project_loading, thermal_component,
                         voltage_component)
from flexact.sensitivity import SensitivityTable

FULL = np.ones((3, 1), dtype=bool)


# ---------------------------------------------------------------- projections

def test_flow_direction():
    assert flow_direction(1.00, 0.98) == 1
    assert flow_direction(0.98, 1.00) == -1
    assert flow_direction(1.0, 1.0) == 1
    assert flow_direction(np.array([1.0, 0.9]), np.array([0.9, 1.0])).tolist() == [1, -1]


def test_project_loading_cancels():
    # 50 % forward on a 200-rated branch against 100 % reverse on a 100-rated one
    assert project_loading([50.0, 100.0], [1, -1], [200.0, 100.0]) == pytest.approx(0.0)
    assert project_loading([60.0, 30.0], [1, 1], [100.0, 100.0]) == pytest.approx(45.0)


def test_project_loading_needs_rating():
    with pytest.raises(FasError, match="no rated"):
        project_loading([10.0], [1], [0.0])
    with pytest.raises(FasError):
        project_loading([], [], [])


def test_project_current():
    assert project_current([0.5, 0.2], [1, -1]) == pytest.approx(0.3)
    assert project_current([0.5, 0.2], [1, -1], ratings=[1.0, 1.0]) == pytest.approx(0.15)


def test_vectorised_projection_matches_scalar(pipe):
    model, state = pipe.model, pipe.base_state
    proj = fas.project_state(model, state)
    t = 12
    for k in (1, 20, 33):
        br = model.incident_branches(k)
        for p in range(3):
            live = [b for b in br if state.branch_mask[p, b]]
            if not live:
                continue
            expect = project_loading(state.loading[t, p, live], state.flow_sign[t, p, live],
                                     model.s_max_pu[live])
            assert proj.loading[t, p, k] == pytest.approx(expect, abs=1e-9)
            cur = project_current(np.abs(state.current[t, p, live]), state.flow_sign[t, p, live])
            assert proj.current[t, p, k] == pytest.approx(cur, abs=1e-12)


# ---------------------------------------------------------------- saturation

def _table(self_p, self_q=None):
    n = len(self_p)
    nvs_p = np.zeros((3, n, 3, n))
    nvs_q = np.zeros_like(nvs_p)
    for k, v in enumerate(self_p):
        nvs_p[:, k, :, k] = np.diag([v] * 3)
        nvs_q[:, k, :, k] = np.diag([(self_q or self_p)[k]] * 3)
    mask = np.ones((3, n), dtype=bool)
    return SensitivityTable(nvs_p, nvs_q, (0.001,), "base", mask, nvs_p[None], nvs_q[None])


def test_saturation_proportional_to_own_sensitivity():
    sat = fas.saturation_levels(_table([-0.02, -0.01, -0.04]), kappa_v=2.0, kappa_t=0.5)
    assert sat.vc_p[0].tolist() == pytest.approx([1.0, 0.5, 2.0])
    assert sat.tc_p[0].tolist() == pytest.approx([0.25, 0.125, 0.5])
    assert sat.max_level == pytest.approx(2.0)


def test_saturation_all_zero_rejected():
    with pytest.raises(FasError, match="all zero"):
        fas.saturation_levels(_table([0.0, 0.0]))


# ---------------------------------------------------------------- droop

LIM = dict(v_min=0.9, v_max=1.1, dv_lo=0.04, dv_hi=0.03)


def test_voltage_droop_examples():
    up, dn = voltage_component(0.93, vc_max=1.0, **LIM)
    assert up == pytest.approx(0.5) and dn == 0.0
    up, dn = voltage_component(1.1, vc_max=0.8, **LIM)
    assert up == 0.0 and dn == -0.8
    up, dn = voltage_component(0.85, vc_max=0.8, **LIM)
    assert up == 0.8
    assert voltage_component(1.0, vc_max=1.0, **LIM) == (0.0, 0.0)


def test_thermal_droop_examples():
    up, dn = thermal_component(90.0, 80.0, 1.0)
    assert (up, dn) == pytest.approx((0.5, -0.5))
    assert thermal_component(-90.0, 80.0, 1.0) == pytest.approx((0.5, -0.5))
    assert thermal_component(-90.0, 80.0, 1.0, mirror="odd") == pytest.approx((-0.5, 0.5))
    assert thermal_component(79.0, 80.0, 1.0) == (0.0, 0.0)
    assert thermal_component(140.0, 80.0, 0.7) == pytest.approx((0.7, -0.7))
    with pytest.raises(FasError, match="mirror"):
        thermal_component(90.0, 80.0, 1.0, mirror="twice")


limits_st = st.tuples(st.floats(0.80, 0.94), st.floats(0.01, 0.05), st.floats(0.01, 0.05),
                      st.floats(1.06, 1.2), st.floats(0.01, 5.0))


@settings(max_examples=200, deadline=None)
@given(limits_st, st.floats(0.0, 1.0))
def test_voltage_droop_properties(lim, u):
    v_min, dv_lo, dv_hi, v_max, vc = lim
    lo, hi = 1 - dv_lo, 1 + dv_hi
    # deadband
    v = lo + u * (hi - lo)
    assert voltage_component(v, v_min, v_max, dv_lo, dv_hi, vc) == (0.0, 0.0)
    # saturation at the hard limits is exact
    assert voltage_component(v_min, v_min, v_max, dv_lo, dv_hi, vc)[0] == vc
    assert voltage_component(v_max, v_min, v_max, dv_lo, dv_hi, vc)[1] == -vc
    assert voltage_component(v_min - u, v_min, v_max, dv_lo, dv_hi, vc)[0] == vc
    # midpoint of each ramp is half saturation
    up, _ = voltage_component((lo + v_min) / 2, v_min, v_max, dv_lo, dv_hi, vc)
    _, dn = voltage_component((hi + v_max) / 2, v_min, v_max, dv_lo, dv_hi, vc)
    assert up == pytest.approx(vc / 2, rel=1e-9)
    assert dn == pytest.approx(-vc / 2, rel=1e-9)
    # monotone between the knee points
    a, _ = voltage_component(lo - u * (lo - v_min), v_min, v_max, dv_lo, dv_hi, vc)
    assert 0.0 <= a <= vc


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 99.0), st.floats(0.01, 5.0), st.floats(0.0, 1.0), st.sampled_from([1.0, -1.0]))
def test_thermal_droop_properties(dt, tc, u, sign):
    assert thermal_component(sign * u * dt, dt, tc) == (0.0, 0.0)
    up, dn = thermal_component(sign * 100.0, dt, tc)
    assert up == tc and dn == -tc
    up, dn = thermal_component(sign * (dt + 100.0) / 2, dt, tc)
    assert up == pytest.approx(tc / 2, rel=1e-9)
    assert dn == pytest.approx(-tc / 2, rel=1e-9)


# ---------------------------------------------------------------- imbalance

def test_imbalance_worked_example():
    v = np.array([[1.1], [1.05], [1.03]])
    imb = imbalance_metrics(v, np.ones((3, 1)), FULL)
    assert np.round(imb.u_v[:, 0], 4).tolist() == [-0.0377, 0.0094, 0.0283]
    assert abs(imb.u_v.sum()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.85, 1.15), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 2.0), min_size=3, max_size=3), st.sampled_from([1.0, -1.0]))
def test_imbalance_sums_to_zero(v, i, sign):
    imb = imbalance_metrics(np.array(v)[:, None], sign * np.array(i)[:, None], FULL)
    assert abs(imb.u_v.sum()) < 1e-12
    assert abs(imb.u_i.sum()) < 1e-12
    assert not imb.degenerate.any()


def test_mixed_current_directions_flagged():
    imb = imbalance_metrics(np.ones((3, 1)), np.array([[0.5], [-0.4], [0.1]]), FULL)
    assert imb.degenerate[0]
    assert np.all(imb.u_i == 0)


def test_single_phase_bus_ignored():
    mask = np.array([[True, True], [True, False], [True, False]])
    v = np.array([[1.0, 1.02], [0.98, 0.0], [1.01, 0.0]])
    imb = imbalance_metrics(v, np.ones((3, 2)), mask)
    assert imb.valid.tolist() == [True, False]
    assert np.all(imb.u_v[:, 1] == 0)


def test_imbalance_channels_literal_and_normalized():
    imb = imbalance_metrics(np.array([[1.1], [1.05], [1.03]]), np.array([[0.2], [0.5], [0.5]]), FULL)
    u_v, u_i = imb.u_v[:, 0], imb.u_i[:, 0]
    lit = imbalance_component(imb)
    nrm = imbalance_component(imb, sign_normalized=True)
    pos, neg = np.maximum(u_v, 0), np.minimum(u_v, 0)
    # phase A: voltage above the mean and current below it, so both terms point down
    assert u_v[0] < 0 and u_i[0] > 0
    assert lit["p_dn"][0, 0] == pytest.approx(u_v[0] + u_i[0])
    assert nrm["p_dn"][0, 0] == pytest.approx(u_v[0] - u_i[0])
    # phases B and C: voltage below the mean and current above it
    assert np.allclose(lit["p_up"][1:, 0], pos[1:] + np.minimum(u_i[1:], 0))
    assert np.allclose(nrm["p_up"][1:, 0], pos[1:] - np.minimum(u_i[1:], 0))
    assert np.allclose(lit["q_dn"][:, 0], neg)
    assert lit["p_dn"][0, 0] > 0  # the literal field breaks channel orientation
    for ch in ("p_up", "q_up"):
        assert np.all(nrm[ch] >= 0)
    for ch in ("p_dn", "q_dn"):
        assert np.all(nrm[ch] <= 0)
    assert np.array_equal(lit["q_up"], nrm["q_up"])


# ---------------------------------------------------------------- combine

def _comp(value, shape=(3, 2)):
    return {ch: np.full(shape, value) for ch in CHANNELS}


def test_combine_adds_components():
    f = combine(_comp(0.5), _comp(0.2), _comp(0.03))
    assert np.allclose(f.p_up, 0.73)
    assert set(f.components) == {"voltage", "thermal", "imbalance"}


def test_combine_shape_mismatch():
    with pytest.raises(FasError, match="index mismatch"):
        combine(_comp(0.5), _comp(0.2, (3, 3)), _comp(0.0))


def test_combine_mask_zeroes_non_device_buses():
    mask = np.array([[True, False]] * 3)
    f = combine(_comp(0.5), _comp(0.1), _comp(0.1), mask=mask)
    assert np.all(f.p_up[:, 1] == 0)
    assert np.allclose(f.p_up[:, 0], 0.7)


def test_fixture_field(pipe):
    f = pipe.fas
    model = pipe.model
    mask = model.device_mask()
    mask[:, model.slack] = False
    for ch in CHANNELS:
        arr = getattr(f, ch)
        assert arr.shape == (24, 3, model.n_bus)
        assert np.all(arr[:, ~mask] == 0)
    assert np.all(f.p_up >= 0) and np.all(f.p_dn <= 0)
    assert np.all(f.q_up >= 0) and np.all(f.q_dn <= 0)
    assert f.max_abs > 0


def test_fixture_imbalance_identity(pipe):
    model, state = pipe.model, pipe.base_state
    proj = fas.project_state(model, state)
    imb = imbalance_metrics(state.V, proj.current, model.phase_mask)
    tp = model.three_phase_buses()
    assert np.abs(imb.u_v[:, :, tp].sum(axis=1)).max() < 1e-12
    assert np.abs(imb.u_i[:, :, tp].sum(axis=1)).max() < 1e-12
