import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from haloscope import halo


def _maxwell_shifted(v, v0=220.0, vo=232.0):
    # lab-frame speed density written out independently of the module
    return v / (math.sqrt(math.pi) * v0 * vo) * (
        math.exp(-((v - vo) / v0) ** 2) - math.exp(-((v + vo) / v0) ** 2)
    )


def test_cdf_matches_quadrature_of_density():
    h = halo.HaloParams(v_esc=None)
    vmax = h.v_max
    norm, _ = integrate.quad(_maxwell_shifted, 0, vmax, limit=200)
    for v in (100.0, 300.0, 500.0, 800.0):
        part, _ = integrate.quad(_maxwell_shifted, 0, v, limit=200)
        assert halo.speed_cdf(v, h) == pytest.approx(part / norm, rel=1e-10)


def test_truncated_density_integrates_to_one():
    h = halo.HaloParams()
    total, _ = integrate.quad(lambda v: float(halo.speed_pdf(v, h)), 0, h.v_max, limit=200)
    assert total == pytest.approx(1.0, rel=1e-10)
    assert float(halo.speed_cdf(h.v_max, h)) == pytest.approx(1.0, abs=1e-15)
    assert h.v_max == 776.0


def test_stationary_observer_is_maxwellian():
    h = halo.HaloParams(v_obs=0.0, v_esc=None)
    x = 1.3
    expected = math.erf(x) - 2 * x * math.exp(-x * x) / math.sqrt(math.pi)
    assert float(halo._raw_speed_cdf(x * 220.0, h)) == pytest.approx(expected, rel=1e-12)


def test_mean_offset_against_independent_quadrature():
    h = halo.HaloParams()
    c = halo.C_KMS
    num, _ = integrate.quad(lambda v: v * v * _maxwell_shifted(v), 0, 776.0, limit=200)
    den, _ = integrate.quad(_maxwell_shifted, 0, 776.0, limit=200)
    expected = num / den / (2 * c * c)
    assert halo.mean_fractional_offset(h) == pytest.approx(expected, rel=1e-9)
    # frozen value of the oracle
    assert expected == pytest.approx(7.0083e-7, rel=1e-4)


@pytest.mark.parametrize("f_a, df, f0", [(1e6, 0.1, 0.0), (1e6 + 0.05, 0.1, 0.0), (2e6, 0.1, 5.0)])
def test_bin_weights_basic(f_a, df, f0):
    start, w = halo.bin_weights(f_a, df, f0, halo.HaloParams())
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)
    assert f0 + start * df >= f_a - 1e-9
    assert f0 + (start + len(w) - 1) * df <= f_a * (1 + halo.MAX_SUPPORT_FRACTION)


@given(st.floats(1e5, 2e6), st.floats(1e5, 2e6))
def test_support_start_monotone_in_mass(a, b):
    lo, hi = sorted((a, b))
    s_lo, _ = halo.bin_weights(lo, 0.1, 0.0, halo.HaloParams())
    s_hi, _ = halo.bin_weights(hi, 0.1, 0.0, halo.HaloParams())
    assert s_lo <= s_hi


def test_invalid_params():
    with pytest.raises(ValueError):
        halo.HaloParams(v0=0)
    with pytest.raises(ValueError):
        halo.HaloParams(v_obs=-1)
