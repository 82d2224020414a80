from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from sklearn.base import clone

from haloscope import denoise
from haloscope.exceptions import (
    CommandNotFoundError,
    ExternalExitError,
    ExternalTimeoutError,
    LengthMismatchError,
)
from haloscope.model import FloatSeries, SampleSeries


def test_moving_average_impulse_plateau():
    x = np.zeros(400)
    x[200] = 1.0
    y = denoise.moving_average(x, 100)
    nz = np.flatnonzero(np.abs(y) > 1e-12)
    assert nz.size == 100 and nz[0] == 151 and nz[-1] == 250
    np.testing.assert_allclose(y[nz], 0.01, rtol=1e-9)


def test_moving_average_constant_and_edges():
    np.testing.assert_allclose(denoise.moving_average(np.full(300, 4.2)), 4.2, rtol=1e-12)
    x = np.arange(10.0)
    y = denoise.moving_average(x, 4)
    assert y[0] == pytest.approx(np.mean(x[0:2]))
    assert y[5] == pytest.approx(np.mean(x[3:7]))


@given(
    hnp.arrays(np.float64, 200, elements=st.floats(-50, 50)),
    hnp.arrays(np.float64, 200, elements=st.floats(-50, 50)),
    st.floats(-3, 3),
)
def test_moving_average_linear(a, b, c):
    lhs = denoise.moving_average(a + c * b)
    rhs = denoise.moving_average(a) + c * denoise.moving_average(b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def _savgol_exact(window, order):
    """Centre weights by exact normal equations over the integers."""
    half = window // 2
    t = range(-half, half + 1)
    m = order + 1
    A = [[Fraction(sum(j ** (r + c) for j in t)) for c in range(m)] for r in range(m)]
    e = [Fraction(int(r == 0)) for r in range(m)]
    # solve A z = e (A symmetric), then weight_j = sum_r z_r j^r
    for col in range(m):
        piv = next(r for r in range(col, m) if A[r][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        e[col], e[piv] = e[piv], e[col]
        for r in range(m):
            if r != col and A[r][col] != 0:
                f = A[r][col] / A[col][col]
                A[r] = [x - f * y for x, y in zip(A[r], A[col])]
                e[r] -= f * e[col]
    z = [e[r] / A[r][r] for r in range(m)]
    return [sum(z[r] * j**r for r in range(m)) for j in t]


@pytest.mark.parametrize("window, order", [(5, 2), (21, 4), (101, 11)])
def test_savgol_coefficients_match_exact_solve(window, order):
    exact = np.array([float(c) for c in _savgol_exact(window, order)])
    np.testing.assert_allclose(denoise.savgol_coefficients(window, order), exact, rtol=1e-8, atol=1e-12)
    assert denoise.savgol_coefficients(window, order).sum() == pytest.approx(1.0, abs=1e-10)


def test_savgol_small_case_closed_form():
    c = denoise.savgol_coefficients(5, 2)
    np.testing.assert_allclose(c, np.array([-3, 12, 17, 12, -3]) / 35, rtol=1e-12)


@pytest.mark.parametrize("degree", [0, 3, 7, 11])
def test_savgol_reproduces_polynomials_in_interior(degree):
    rng = np.random.default_rng(degree)
    t = np.linspace(-1, 1, 2_001)
    x = np.polynomial.Polynomial(rng.normal(size=degree + 1))(t)
    y = denoise.savitzky_golay(x, 101, 11)
    np.testing.assert_allclose(y[50:-50], x[50:-50], atol=1e-9 * np.abs(x).max())


def test_savgol_even_window_suggests_odd():
    with pytest.raises(ValueError, match="use 101 or 99"):
        denoise.savitzky_golay(np.zeros(500), 100, 11)
    with pytest.raises(ValueError):
        denoise.SavitzkyGolayDenoiser(window=100).fit()


def test_transform_preserves_kind_and_batches():
    s = SampleSeries(np.arange(-50, 150, dtype=np.int8), 1_000.0, start_index=7)
    out = denoise.MovingAverageDenoiser(10).fit_transform(s)
    assert isinstance(out, FloatSeries) and out.start_index == 7 and len(out) == 200
    X = np.random.default_rng(0).normal(size=(3, 300))
    batch = denoise.SavitzkyGolayDenoiser().transform(X)
    np.testing.assert_allclose(batch[1], denoise.savitzky_golay(X[1]), rtol=1e-12)
    assert clone(denoise.MovingAverageDenoiser(7)).window == 7


def test_spec_round_trip_and_aliases():
    spec = denoise.DenoiserSpec("SG")
    assert spec.kind == "savitzky_golay" and spec.window == 101
    assert denoise.DenoiserSpec.from_dict(spec.to_dict()) == spec
    assert isinstance(denoise.make_denoiser({"kind": "ma"}), denoise.MovingAverageDenoiser)
    with pytest.raises(ValueError):
        denoise.DenoiserSpec("wavelet")


def test_external_identity(script):
    x = FloatSeries(np.linspace(-3, 3, 1_000), 1_000.0)
    y = denoise.run_external(x, script("identity_copier.py"))
    np.testing.assert_array_equal(y.samples, x.samples.astype(np.float32))


def test_external_matches_moving_average_reference(script):
    x = np.random.default_rng(4).normal(0, 5, 3_000)
    ext = denoise.ExternalDenoiser(script("moving_average_ref.py"), sample_rate=1e4).transform(x)
    np.testing.assert_allclose(ext, denoise.moving_average(x, 100), rtol=1e-6, atol=1e-6)


def test_external_wrong_length(script):
    with pytest.raises(LengthMismatchError, match="expected 100 samples, got 99"):
        denoise.run_external(np.zeros(100), script("wrong_length.py"), sample_rate=100)


def test_external_failure_surfaces_status_and_stderr(script):
    with pytest.raises(ExternalExitError, match="status 7.*model weights missing") as err:
        denoise.run_external(np.zeros(10), script("failing.py"), sample_rate=10)
    assert err.value.returncode == 7


def test_external_timeout(script):
    with pytest.raises(ExternalTimeoutError, match="timed out"):
        denoise.run_external(np.zeros(10), script("sleeper.py"), timeout=1.0, sample_rate=10)


def test_external_not_found(tmp_path):
    with pytest.raises(CommandNotFoundError):
        denoise.run_external(np.zeros(10), "no-such-denoiser-binary", sample_rate=10)
    with pytest.raises(CommandNotFoundError):
        denoise.run_external(np.zeros(10), [str(tmp_path / "nope.py")], sample_rate=10)


@given(
    hnp.arrays(np.float64, 300, elements=st.floats(-50, 50)),
    hnp.arrays(np.float64, 300, elements=st.floats(-50, 50)),
    st.floats(-3, 3),
)
def test_savgol_linear(a, b, c):
    lhs = denoise.savitzky_golay(a + c * b)
    rhs = denoise.savitzky_golay(a) + c * denoise.savitzky_golay(b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize("den", [denoise.MovingAverageDenoiser(), denoise.SavitzkyGolayDenoiser()])
def test_dc_preserved_and_length_kept(den):
    y = den.transform(np.full(1_000, -2.5))
    assert y.shape == (1_000,)
    np.testing.assert_allclose(y, -2.5, rtol=1e-12)
