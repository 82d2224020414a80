import warnings

import numpy as np
import pytest
from sklearn.base import clone

from haloscope import limits, simgen
from haloscope.exceptions import DataError
from haloscope.model import PhysicalConstants, PowerSpectrum

DF = 0.1
N_AVG = 30


def _grid(f_lo, f_hi):
    f0 = np.floor(f_lo / DF) * DF
    n = int(np.ceil((f_hi - f0) / DF))
    return f0, n


def asimov(masses, A, b=1e-5, f_lo=None, f_hi=None, n_avg=N_AVG, gain=1.0):
    """Expected PSD ``b + A * gain * w / df`` with signals at ``masses``."""
    masses = np.atleast_1d(masses)
    f0, n = _grid(f_lo or masses.min() - 50, f_hi or masses.max() + 50)
    v = np.full(n, b)
    for m, a in zip(masses, np.broadcast_to(A, masses.shape)):
        t = limits.build_template(m, DF, f0)
        v[t.start : t.stop] += a * gain * t.weights / DF
    return PowerSpectrum(v, df=DF, f0=f0, n_averaged=n_avg)


def _fit(psd, f_a, **kw):
    return limits.fit_window(psd, limits.build_template(f_a, psd.df, psd.f0), **kw)


def test_mass_frequency_round_trip():
    f = np.array([1e5, 1e6, 2e6])
    np.testing.assert_allclose(limits.frequency_hz(limits.mass_ev(f)), f, rtol=1e-15)
    assert limits.mass_ev(1e6) == pytest.approx(4.135667696e-9, rel=1e-9)
    grid = limits.geometric_mass_grid()
    assert grid.size == 10_000 and grid[0] == 1e5 and grid[-1] == pytest.approx(2e6)
    np.testing.assert_allclose(np.diff(np.log(grid)), np.log(20) / 9_999, rtol=1e-9)


def test_template_support_and_window():
    t = limits.build_template(1e6, DF, 999_900.0)
    assert t.weights.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(t.weights >= 0)
    assert t.frequencies[0] >= 1e6 - 1e-6 and t.frequencies[0] - DF < 1e6
    lo, hi = limits.window_bounds(t)
    assert lo < t.start and hi > t.stop
    assert hi - lo >= max(5.5e-6 * 1e6 / DF, 30)
    with pytest.warns(UserWarning):
        small = limits.build_template(1e5, DF, 99_900.0)
    lo, hi = limits.window_bounds(small)
    assert hi - lo >= 30


def test_template_warns_when_underresolved():
    with pytest.warns(UserWarning, match="poorly resolved"):
        limits.build_template(1e5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        limits.build_template(1e6, DF)


def test_template_below_grid():
    with pytest.raises(DataError):
        limits.build_template(100.0, DF, f0=200.0)


@pytest.mark.parametrize("f_a, A", [(1e6, 3e-5), (2.5e5, 1e-4), (1.5e6, 0.0)])
def test_asimov_recovers_injection(f_a, A):
    fit = _fit(asimov(f_a, A), f_a)
    assert fit.a_hat == pytest.approx(A, rel=1e-6, abs=1e-12)
    assert fit.b_hat == pytest.approx(1e-5, rel=1e-9)
    assert fit.lnL_max == pytest.approx(0.0, abs=1e-20)


def test_ts_shape():
    f_a = 1e6
    fit = _fit(asimov(f_a, 2e-5), f_a)
    assert limits.test_statistic(fit, fit.a_hat) == pytest.approx(0.0, abs=1e-12)
    assert limits.test_statistic(fit, 0.5 * fit.a_hat) == 0.0
    A = fit.a_hat + np.linspace(0, 4e-5, 12)
    ts = limits.test_statistic(fit, A)
    assert np.all(np.diff(ts) > 0)
    pt = limits.upper_limit(fit)
    assert limits.test_statistic(fit, pt.a95) == pytest.approx(2.71, rel=1e-3)
    assert pt.ts_at_zero > 2.71


def test_zero_power_gives_zero_coupling():
    assert limits.coupling_from_power(0.0) == 0.0
    assert np.isnan(limits.coupling_from_power(-1.0))


def test_coupling_quadrupling_and_flux():
    c = PhysicalConstants()
    g1 = limits.coupling_from_power(1e-5, c)
    assert limits.coupling_from_power(4e-5, c) == pytest.approx(2 * g1, rel=1e-14)
    assert g1**2 * c.flux_factor == pytest.approx(1e-5, rel=1e-14)
    assert c.flux_factor == pytest.approx(0.4 * 0.0217**2 * 890**2, rel=1e-14)


@pytest.mark.parametrize("c", [0.01, 3.0, 1e4])
def test_limit_scales_with_psd(c):
    f_a = 8e5
    base = asimov(f_a, 0.0)
    rng = np.random.default_rng(1)
    noisy = PowerSpectrum(rng.gamma(N_AVG, base.values / N_AVG), df=DF, f0=base.f0, n_averaged=N_AVG)
    scaled = PowerSpectrum(noisy.values * c, df=DF, f0=base.f0, n_averaged=N_AVG)
    a1 = limits.upper_limit(_fit(noisy, f_a)).a95_raw
    a2 = limits.upper_limit(_fit(scaled, f_a)).a95_raw
    assert a2 == pytest.approx(c * a1, rel=1e-3)


def test_calibration_rescales_limit():
    f_a = 8e5
    psd = asimov(f_a, 0.0)
    a1 = limits.upper_limit(_fit(psd, f_a)).a95
    a4 = limits.upper_limit(_fit(psd, f_a, calibration=limits.Calibration((0.0, 1.0), (4.0, 4.0)))).a95
    assert a4 == pytest.approx(a1 / 4, rel=1e-3)
    gain = limits.Calibration.from_gain(simgen.BandpassGain())
    assert gain.power_gain(1e3) == pytest.approx(0.5, rel=2e-3)


def test_calibration_csv(tmp_path):
    p = tmp_path / "cal.csv"
    p.write_text("frequency_hz,power_gain\n0,1\n10,3\n")
    cal = limits.Calibration.from_csv(p)
    assert cal.power_gain(5.0) == 2.0 and cal.power_gain(50.0) == 3.0
    (tmp_path / "bad.csv").write_text("f,g\n1,2\n")
    with pytest.raises(DataError):
        limits.Calibration.from_csv(tmp_path / "bad.csv")


def test_requires_thirty_averages():
    psd = asimov(1e6, 0.0, n_avg=29)
    with pytest.raises(DataError, match="at least 30"):
        _fit(psd, 1e6)
    with pytest.raises(DataError):
        limits.scan_masses(psd, [1e6])


def test_scan_matches_single_fits_and_is_deterministic():
    masses = np.array([4e5, 6e5, 9e5])
    psd = asimov(masses, 1e-5, f_lo=3.9e5, f_hi=9.1e5)
    rng = np.random.default_rng(3)
    noisy = PowerSpectrum(rng.gamma(N_AVG, psd.values / N_AVG), df=DF, f0=psd.f0, n_averaged=N_AVG)
    curve = limits.scan_masses(noisy, masses)
    for i, m in enumerate(masses):
        single = limits.upper_limit(_fit(noisy, m))
        assert curve.a_hat[i] == pytest.approx(single.a_hat, rel=1e-6, abs=1e-12)
        assert curve.a95[i] == pytest.approx(single.a95, rel=1e-3)
    again = limits.scan_masses(noisy, masses)
    assert np.array_equal(curve.a95, again.a95, equal_nan=True)
    chunks = limits.LimitCurve.concatenate(limits.iter_scan(noisy, masses, chunk_size=2))
    assert np.array_equal(chunks.a95, curve.a95)


def test_out_of_range_masses_are_nan_rows():
    psd = asimov(1e6, 0.0)
    curve = limits.scan_masses(psd, [1e6, 5e6])
    assert np.isfinite(curve.a95[0]) and np.isnan(curve.a95[1])
    assert 1 in curve.errors
    assert len(limits.scan_masses(psd, [])) == 0


def test_curve_csv_and_json(tmp_path):
    psd = asimov(1e6, 0.0)
    curve = limits.scan_masses(psd, [1e6, 5e6])
    curve.to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "mass_ev,frequency_hz,a95,g95,ts_at_zero"
    assert lines[2].split(",")[2] == "nan"
    curve.to_json(tmp_path / "l.json")


def _null_scan(n_masses, A=0.0, seed=0):
    masses = 3e5 + 60.0 * np.arange(n_masses)  # windows do not overlap
    psd = asimov(masses, A)
    rng = np.random.default_rng(seed)
    data = PowerSpectrum(rng.gamma(N_AVG, psd.values / N_AVG), df=DF, f0=psd.f0, n_averaged=N_AVG)
    return masses, psd, limits.scan_masses(data, masses)


def test_null_estimator_unbiased():
    _, _, curve = _null_scan(1_500, seed=11)
    a = curve.a_hat
    assert abs(a.mean()) < 3 * a.std(ddof=1) / np.sqrt(a.size)


def test_coverage_small():
    masses, psd, null = _null_scan(1_500, seed=12)
    sigma = np.median(null.a95_raw - null.a_hat) / 1.645
    A_true = 2 * sigma
    _, planted_psd, _ = _null_scan(1_500, A=A_true)
    rng = np.random.default_rng(13)
    data = PowerSpectrum(rng.gamma(N_AVG, planted_psd.values / N_AVG), df=DF, f0=psd.f0, n_averaged=N_AVG)
    curve = limits.scan_masses(data, masses)
    miss = np.mean(curve.a95_raw < A_true)
    assert 0.03 <= miss <= 0.07


def test_band_ordering_and_determinism():
    masses = np.array([5e5, 7e5])
    bg = simgen.NoiseModel(white_sigma=5.0, gain=simgen.UnityGain())
    b1 = limits.brazil_band(bg, 30, masses, n_trials=100, seed=4)
    b2 = limits.brazil_band(bg, 30, masses, n_trials=100, seed=4, workers=2)
    np.testing.assert_allclose(b1.g_quantiles, b2.g_quantiles, rtol=1e-12)
    assert np.all(np.diff(b1.g_quantiles, axis=1) >= 0)
    assert b1.columns()[2:] == ("g95_p2.5", "g95_p16", "g95_p50", "g95_p84", "g95_p97.5")
    with pytest.raises(ValueError):
        limits.brazil_band(bg, 30, masses, n_trials=50)


def test_scanner_estimator():
    psd = asimov(1e6, 0.0)
    est = clone(limits.LimitScanner(mass_grid=[1e6]))
    g = est.fit(psd).predict()
    assert g.shape == (1,) and np.isfinite(g[0])
