import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofm.metrics import MetricsReport, autocovariance, distribution_diagnostics, msll, power_spectrum, smse


def test_smse_examples(rng):
    t = rng.normal(size=(1, 20))
    assert smse(t[0], t) == 0
    truth = rng.normal(size=(50, 20))
    assert smse(np.full(20, truth.mean()), truth) == pytest.approx(1.0)


def test_smse_errors():
    with pytest.raises(ValueError):
        smse(np.zeros(3), np.ones((4, 3)))
    with pytest.raises(ValueError):
        smse(np.zeros(3), np.ones((4, 4)))


@given(seed=st.integers(0, 10 ** 6), c=st.floats(-100, 100))
def test_smse_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    truth, pred = r.normal(size=(30, 8)), r.normal(size=8)
    assert smse(pred + c, truth + c) == pytest.approx(smse(pred, truth), rel=1e-9)


def test_msll_examples():
    assert msll(np.zeros(4), np.ones(4), np.zeros((1, 4))) == pytest.approx(0.5 * math.log(2 * math.pi))
    assert msll(np.zeros(1), np.ones(1), np.ones((1, 1))) == pytest.approx(1.4189385332, abs=1e-9)
    with pytest.raises(ValueError):
        msll(np.zeros(2), np.array([1.0, 0.0]), np.zeros((1, 2)))


def test_msll_prefers_true_variance(rng):
    resid_var = 0.3
    truth = rng.normal(scale=math.sqrt(resid_var), size=(2000, 10))
    grid = [0.05, 0.1, 0.2, 0.3]
    vals = [msll(np.zeros(10), np.full(10, s2), truth) for s2 in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert msll(np.zeros(10), np.full(10, 3.0), truth) > vals[-1]


def test_identical_sets_zero(rng):
    a = rng.normal(size=(60, 1, 32))
    d = distribution_diagnostics(a, a)
    assert d == {"density_mse": 0.0, "autocov_mse": 0.0, "spectra_mse": 0.0}


def test_two_spike_histogram():
    a, b = np.zeros((50, 16)), np.ones((50, 16))
    # 64 bins of width 1/64: density 64 in the first bin for a, in the last for b
    assert distribution_diagnostics(a, b)["density_mse"] == pytest.approx(2 * 64 ** 2 / 64)


@given(seed=st.integers(0, 10 ** 6))
def test_diagnostics_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(50, 16)), r.normal(scale=2, size=(55, 16))
    d1, d2 = distribution_diagnostics(a, b), distribution_diagnostics(b, a)
    for k in d1:
        assert d1[k] == pytest.approx(d2[k], rel=1e-12)


def test_diagnostics_errors(rng):
    with pytest.raises(ValueError):
        distribution_diagnostics(rng.normal(size=(10, 8)), rng.normal(size=(60, 8)))
    with pytest.raises(ValueError):
        distribution_diagnostics(rng.normal(size=(60, 8)), rng.normal(size=(60, 9)))


def test_autocovariance_and_spectrum_oracles(rng):
    x = rng.normal(size=(5, 12))
    ac = autocovariance(x)
    xc = x - x.mean(axis=1, keepdims=True)
    for k in (0, 3, 6):
        loop = np.mean([sum(row[i] * row[i + k] for i in range(12 - k)) / 12 for row in xc])
        assert ac[k] == pytest.approx(loop, abs=1e-12)
    assert len(ac) == 7
    ps = power_spectrum(x)
    np.testing.assert_allclose(ps[0], np.mean(x.sum(axis=1) ** 2) / 12)


def test_report():
    r = MetricsReport(smse=0.1, msll=-0.3, counts={"truth": 10})
    assert '"smse": 0.1' in r.to_json()
    assert "msll" in r.table()
    with pytest.raises(ValueError):
        MetricsReport(smse=-1.0)
    with pytest.raises(ValueError):
        MetricsReport(msll=float("nan"))
