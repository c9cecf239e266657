import numpy as np
import pytest
from scipy import stats as sps

from phaseid import load_fixture
from phaseid.connection import PhaseAssignment, predict_voltage
from phaseid.mmle import prepare
from phaseid.simulate import SimulationSpec, generate, truth_assignment
from phaseid.stats import (DegenerateSeriesError, accuracy, autocorrelation, ks_normality,
                           residuals, summarize_residuals)


def test_ks_statistic_matches_reference(rng):
    x = rng.normal(3.0, 2.0, size=500)
    z = (x - x.mean()) / x.std(ddof=1)
    ours = ks_normality(x)
    ref = sps.kstest(z, "norm", method="asymp")
    assert ours.statistic == pytest.approx(ref.statistic, abs=1e-14)
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-6)


def test_ks_calibration_on_gaussian_draws():
    passes = [ks_normality(np.random.default_rng(s).standard_normal(10**4)).passed
              for s in range(100)]
    assert np.mean(passes) >= 0.94


def test_ks_power_on_uniform_draws(rng):
    assert not ks_normality(rng.uniform(size=10**4)).passed


def test_ks_rejects_degenerate_input():
    with pytest.raises(DegenerateSeriesError):
        ks_normality(np.full(100, 2.0))
    with pytest.raises(ValueError):
        ks_normality(np.arange(10.0))


def test_autocorrelation_white_band(rng):
    T = 5000
    r = autocorrelation(rng.standard_normal(T), 20)
    assert r[0] == 1.0
    assert np.mean(np.abs(r[1:]) <= 3 / np.sqrt(T)) >= 0.95


def test_autocorrelation_of_repeated_samples(rng):
    n = np.repeat(rng.standard_normal(500), 2)
    assert autocorrelation(n, 5)[1] > 0.45
    walk = np.cumsum(rng.standard_normal(2000))
    assert autocorrelation(walk, 1)[1] > 0.9


def test_autocorrelation_matches_direct_formula(rng):
    x = rng.normal(size=300)
    d = x - x.mean()
    r = autocorrelation(x, 4)
    for lag in range(1, 5):
        assert r[lag] == pytest.approx(np.sum(d[:-lag] * d[lag:]) / np.sum(d * d), rel=1e-12)


def test_autocorrelation_errors():
    with pytest.raises(DegenerateSeriesError):
        autocorrelation(np.zeros(50))
    with pytest.raises(ValueError):
        autocorrelation(np.arange(10.0), 20)


def test_accuracy_counts():
    classes = ("single",) * 25
    ids = tuple(f"L{k}" for k in range(25))
    truth = {lid: "A" for lid in ids}
    x = PhaseAssignment.from_indices(np.zeros(25, int), classes, ids)
    assert accuracy(x, truth) == 1.0
    assert accuracy(x.with_choice(3, 1), truth) == pytest.approx(0.96)
    with pytest.raises(ValueError):
        accuracy(x, {"other": "A"})


def test_accuracy_accepts_reversed_pair_label():
    x = PhaseAssignment.from_indices([2], ("two",), ("d",))
    assert accuracy(x, {"d": "AC"}) == 1.0


def test_residuals_equal_injected_noise():
    fm = load_fixture("feeder_5load_3ph")
    spec = SimulationSpec(mode="linear", T=400, noise=0.001, seed=6)
    res = generate(spec, fm)
    red, ds, rs = prepare(fm, res.measurements)
    x = truth_assignment(red)
    n = residuals(x, ds, rs)
    # without laterals the linear data are exact, so the residual is the
    # voltage noise step minus the model's response to the power noise steps
    dv, dp, dq = (np.diff(res.noise[k], axis=0) for k in ("v", "p", "q"))
    expect = dv - predict_voltage(x, np.zeros(ds.vref.shape), dp, dq, rs)
    assert np.allclose(n, expect, rtol=0, atol=1e-15)
    summary = summarize_residuals(n, red.load_ids)
    assert sum(s.ks_pass for s in summary) >= 4
    assert all(s.white for s in summary)
