import numpy as np
import pytest

from flexact import sensitivity
from flexact.sensitivity import SensitivityError, compute_all, compute_nvs, reference_load

from conftest import balanced_load, chain, twin_laterals


@pytest.fixture(scope="module")
def chain_tables():
    model = chain(4)
    return model, *compute_all(model, balanced_load(model, 6.0, 1.0))


def test_own_phase_negative_and_grows_with_depth(chain_tables):
    model, nvs, _ = chain_tables
    own = nvs.self_p()
    assert np.all(own[:, 1:] < 0)
    # deeper buses see a larger drop for the same injection
    assert np.all(np.diff(own[:, 1:], axis=1) < 0)
    assert np.all(nvs.self_q()[:, 1:] < 0)


def test_slack_row_and_column_zero(chain_tables):
    model, nvs, _ = chain_tables
    k0 = model.slack
    assert np.all(nvs.nvs_p[:, k0] == 0)
    assert np.all(nvs.nvs_p[:, :, :, k0] == 0)
    assert not nvs.perturbed[:, k0].any()


def test_cross_phase_entries_nonzero(chain_tables):
    _, nvs, _ = chain_tables
    # mutual coupling: loading phase A moves phases B and C at the same bus
    assert abs(nvs.nvs_p[1, 3, 0, 3]) > 1e-4
    assert abs(nvs.nvs_p[2, 3, 0, 3]) > 1e-4


def test_halving_level_changes_little(chain_tables):
    _, nvs, _ = chain_tables
    a, b = nvs.per_level_p[0], nvs.per_level_p[1]
    nz = b != 0
    assert np.all(np.abs(a - b)[nz] < 0.05 * np.abs(b[nz]))


def test_average_over_levels_is_exact(chain_tables):
    _, nvs, _ = chain_tables
    assert np.array_equal(nvs.nvs_p, nvs.per_level_p.mean(axis=0))
    assert np.array_equal(nvs.nvs_q, nvs.per_level_q.mean(axis=0))
    assert nvs.levels == sensitivity.DEFAULT_LEVELS


def test_upstream_observation_equals_shared_path(chain_tables):
    # in a radial feeder the effect of a far injection at a near bus matches
    # the near injection's own effect to first order
    _, nvs, _ = chain_tables
    assert nvs.nvs_p[0, 1, 0, 4] == pytest.approx(nvs.nvs_p[0, 1, 0, 1], rel=0.05)


def test_symmetric_laterals_equal():
    model = twin_laterals()
    nvs = compute_nvs(model, balanced_load(model, 5.0))
    k = {b: model.bus_index(b) for b in "2345"}
    for p in range(3):
        assert nvs.nvs_p[p, k["3"], p, k["3"]] == pytest.approx(nvs.nvs_p[p, k["5"], p, k["5"]], rel=1e-6)
        assert nvs.nvs_p[p, k["2"], p, k["3"]] == pytest.approx(nvs.nvs_p[p, k["4"], p, k["5"]], rel=1e-6)


def test_targets_restrict_perturbation():
    model = chain(3)
    targets = np.zeros((3, 4), dtype=bool)
    targets[1, 2] = True
    targets[:, 0] = True  # slack is dropped regardless
    nvs = compute_nvs(model, balanced_load(model, 5.0), targets=targets)
    assert nvs.perturbed.sum() == 1
    assert np.count_nonzero(np.abs(nvs.nvs_p).sum(axis=(0, 1))) == 1


def test_thermal_entry_positive_for_load_increase(chain_tables):
    model, _, th = chain_tables
    # feeding more load raises the loading projected at the head bus
    assert th.projected_p[0, 1, 0, 3] > 0
    # and the sending-end power of every upstream branch grows by ~1 pu per pu
    for b in range(3):
        assert th.branch_p[0, b, 0, 3].real == pytest.approx(1.0, abs=0.05)


def test_thermal_sign_under_reverse_flow():
    model = chain(4)
    _, th = compute_all(model, balanced_load(model, -20.0))
    # signed projection is negative under reverse flow; more load brings it toward zero
    assert th.projected_p[0, 1, 0, 3] > 0
    assert th.branch_p[0, 0, 0, 3].real > 0


def test_empty_levels():
    model = chain(1)
    with pytest.raises(SensitivityError, match="empty levels"):
        compute_nvs(model, balanced_load(model, 1.0), perturbation_levels=())
    with pytest.raises(SensitivityError, match="nonzero"):
        compute_nvs(model, balanced_load(model, 1.0), perturbation_levels=(0.0,))


def test_failed_level_dropped_with_warning():
    model = chain(2, length_m=200.0)
    base = balanced_load(model, 60.0)
    with pytest.warns(RuntimeWarning, match="level 2.0 dropped"):
        nvs = compute_nvs(model, base, perturbation_levels=(0.001, 2.0))
    assert nvs.levels == (0.001,)
    assert nvs.per_level_p.shape[0] == 1


def test_all_levels_failing_raises():
    model = chain(2, length_m=200.0)
    with pytest.raises(SensitivityError):
        with pytest.warns(RuntimeWarning):
            compute_nvs(model, balanced_load(model, 60.0), perturbation_levels=(2.0, 3.0))


def test_reference_load_choice():
    net = np.arange(12, dtype=complex).reshape(4, 3, 1)
    assert np.array_equal(reference_load(net, "mean"), net.mean(axis=0))
    assert np.array_equal(reference_load(net, 2), net[2])


def test_fixture_halving_and_own_sign(pipe):
    nvs = pipe.nvs
    for table in (nvs.per_level_p, nvs.per_level_q):
        a, b = table[0], table[1]
        nz = b != 0
        assert np.all(np.abs(a - b)[nz] < 0.05 * np.abs(b[nz]))
    assert np.all(nvs.self_p()[nvs.perturbed] < 0)
