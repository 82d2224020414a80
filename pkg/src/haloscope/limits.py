"""Axion search on an averaged science PSD: templates, fits and limits.

For every candidate axion rest frequency ``f_a`` a lineshape template
``w`` is fitted, together with a flat background ``b``, to the averaged
PSD ``d`` inside a sliding window.  The per-bin model is

    mu_i = b + A * kappa_i * w_i,      kappa_i = power_gain(f_i) / df

with ``A`` the signal power (mV^2) at the detector input.  Averaged
periodogram bins have standard deviation ``mu_i / sqrt(n)`` for ``n``
averaged segments, and the fit minimises

    Q(A, b) = sum_i (d_i / mu_i - 1)^2,        lnL = -(n / 2) Q

(see :func:`fit_window`).  The one-sided test statistic is
``TS(A) = n [Q(A, b_A) - Q(A_hat, b_hat)]`` for ``A > A_hat`` (0 otherwise),
with ``b_A`` the background re-fitted at fixed ``A``; the 95% upper limit
is where ``TS`` crosses 2.71.  Couplings follow from ``A = g^2 * F`` with
``F = rho * G^2 * V^2 * B^2``.

All fits for a scan run together on flat arrays (one segment per window)
so a 10^4-mass scan costs a few hundred vectorised passes.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import constants as _const
from sklearn.base import BaseEstimator

from . import halo as _halo
from ._validation import check_positive, check_positive_int
from .exceptions import DataError, NumericalError
from .model import PhysicalConstants, PowerSpectrum
from .parallel import ordered_map, resolve_workers, split_range

#: TS threshold of a one-sided 95% limit (half chi-square, 1 dof).
TS_THRESHOLD = 2.71
WINDOW_FRACTION = 5.5e-6
MIN_WINDOW_BINS = 30
MIN_AVERAGES = 30
BAND_PERCENTILES = (2.5, 16.0, 50.0, 84.0, 97.5)
#: Planck constant in eV s, for mass <-> frequency.
H_EV_S = _const.h / _const.e


def mass_ev(frequency_hz):
    """Axion mass (eV) for a rest frequency (Hz): ``m = h f``."""
    return np.asarray(frequency_hz, dtype=np.float64) * H_EV_S


def frequency_hz(mass):
    return np.asarray(mass, dtype=np.float64) / H_EV_S


def geometric_mass_grid(f_lo: float = 1e5, f_hi: float = 2e6, n: int = 10_000) -> np.ndarray:
    """Log-spaced rest frequencies (Hz)."""
    n = check_positive_int(n, "n", minimum=1)
    if not 0 < f_lo <= f_hi:
        raise ValueError("need 0 < f_lo <= f_hi")
    return np.geomspace(f_lo, f_hi, n)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Calibration:
    """Power gain between the detector input and the PSD.

    Either a tabulated curve (interpolated linearly, held constant beyond
    its ends) or a callable ``power_gain(f)``.
    """

    frequencies: tuple | None = None
    gains: tuple | None = None
    function: object = None

    def __post_init__(self):
        if self.function is None:
            if self.frequencies is None:
                object.__setattr__(self, "frequencies", (0.0, 1.0))
                object.__setattr__(self, "gains", (1.0, 1.0))
            f = np.asarray(self.frequencies, dtype=np.float64)
            g = np.asarray(self.gains, dtype=np.float64)
            if f.shape != g.shape or f.ndim != 1 or f.size < 1:
                raise ValueError("calibration needs matching 1-D frequency and gain columns")
            if np.any(np.diff(f) <= 0):
                raise ValueError("calibration frequencies must be strictly increasing")
            if np.any(g <= 0) or not np.all(np.isfinite(g)):
                raise ValueError("calibration gains must be positive and finite")
            object.__setattr__(self, "frequencies", tuple(f.tolist()))
            object.__setattr__(self, "gains", tuple(g.tolist()))

    def power_gain(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if self.function is not None:
            return np.asarray(self.function(f), dtype=np.float64)
        return np.interp(f, self.frequencies, self.gains)

    @classmethod
    def from_gain(cls, amplitude_gain) -> "Calibration":
        """Power gain ``|H(f)|^2`` of an amplitude response (e.g. the simulator's)."""
        return cls(function=_SquaredGain(amplitude_gain))

    @classmethod
    def from_csv(cls, path) -> "Calibration":
        """Read ``frequency_hz,power_gain`` rows (header required)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"frequency_hz", "power_gain"} <= set(rows[0]):
            raise DataError(f"{path}: expected columns frequency_hz,power_gain")
        f = [float(r["frequency_hz"]) for r in rows]
        g = [float(r["power_gain"]) for r in rows]
        return cls(tuple(f), tuple(g))

    def describe(self) -> dict:
        if self.function is not None:
            inner = getattr(self.function, "gain", None)
            return {"kind": "gain", "gain": inner.to_dict() if hasattr(inner, "to_dict") else repr(inner)}
        return {"kind": "table", "n_points": len(self.frequencies)}


@dataclass(frozen=True)
class _SquaredGain:
    gain: object

    def __call__(self, f):
        return np.asarray(self.gain(f), dtype=np.float64) ** 2


# --------------------------------------------------------------------------
# templates and windows


@dataclass(frozen=True)
class AxionTemplate:
    """Lineshape of one axion mass on a PSD grid.

    ``weights[j]`` belongs to bin ``start + j`` of the grid
    ``(df, f0)``; bins are indexed from ``f0``.
    """

    f_a: float
    start: int
    weights: np.ndarray
    df: float
    f0: float
    halo: _halo.HaloParams = field(default_factory=_halo.HaloParams)

    @property
    def stop(self) -> int:
        return self.start + len(self.weights)

    @property
    def width_hz(self) -> float:
        return len(self.weights) * self.df

    @property
    def frequencies(self) -> np.ndarray:
        return self.f0 + self.df * np.arange(self.start, self.stop)


def build_template(
    f_a: float,
    df: float,
    f0: float = 0.0,
    halo: _halo.HaloParams | None = None,
    n_bins: int | None = None,
) -> AxionTemplate:
    """Bin the halo lineshape of an axion at ``f_a`` onto the grid ``(df, f0)``.

    Warns when ``df > 1e-6 * f_a`` (lineshape barely resolved).

    Raises
    ------
    DataError
        ``f_a`` below the grid start, or support beyond ``n_bins``.
    """
    halo = halo or _halo.HaloParams()
    check_positive(f_a, "f_a")
    check_positive(df, "df")
    if f_a < f0:
        raise DataError(f"f_a = {f_a} Hz lies below the grid start {f0} Hz")
    if df > 1e-6 * f_a:
        warnings.warn(
            f"bin width {df} Hz exceeds 1e-6 * f_a at f_a = {f_a} Hz; "
            "the lineshape is poorly resolved",
            stacklevel=2,
        )
    start, weights = _halo.bin_weights(f_a, df, f0, halo)
    if n_bins is not None and start + len(weights) > n_bins:
        raise DataError(
            f"template for f_a = {f_a} Hz ends at bin {start + len(weights)}, "
            f"beyond the grid's {n_bins} bins"
        )
    weights = np.asarray(weights)
    weights.flags.writeable = False
    return AxionTemplate(float(f_a), int(start), weights, float(df), float(f0), halo)


def window_bounds(template: AxionTemplate, n_bins: int | None = None,
                  fraction: float = WINDOW_FRACTION, min_bins: int = MIN_WINDOW_BINS):
    """``[lo, hi)`` bin range of the sliding window for a template.

    Width is ``max(fraction * f_a, min_bins * df)``, centred on the
    template support and widened if needed so it always contains it.
    """
    width = max(int(math.ceil(fraction * template.f_a / template.df)), int(min_bins))
    width = max(width, len(template.weights) + 2)
    centre = 0.5 * (template.start + template.stop)
    lo = int(math.floor(centre - 0.5 * width + 0.5))
    hi = lo + width
    lo = min(lo, template.start - 1)
    hi = max(hi, template.stop + 1)
    if lo < 0 or (n_bins is not None and hi > n_bins):
        raise DataError(
            f"window [{lo}, {hi}) for f_a = {template.f_a} Hz does not fit the spectrum"
            + (f" of {n_bins} bins" if n_bins is not None else "")
        )
    return lo, hi


# --------------------------------------------------------------------------
# batched fitting on flat arrays


class _Layout:
    """Flattened windows of a scan: bin index, signal shape, window offsets."""

    def __init__(self, idx, shape, offsets, valid, templates):
        self.idx = idx
        self.shape = shape
        self.offsets = offsets
        self.valid = valid
        self.templates = templates
        self.sizes = np.diff(np.append(offsets, idx.size))
        self.seg = np.repeat(np.arange(offsets.size), self.sizes)

    @property
    def n_windows(self) -> int:
        return self.offsets.size


def _build_layout(masses, df, f0, n_bins, halo, calibration, fraction, min_bins, errors):
    idx_parts, shape_parts, offsets, valid, templates = [], [], [], [], []
    pos = 0
    for m, f_a in enumerate(masses):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                t = build_template(f_a, df, f0, halo, n_bins)
            lo, hi = window_bounds(t, n_bins, fraction, min_bins)
        except DataError as exc:
            errors[m] = str(exc)
            templates.append(None)
            continue
        bins = np.arange(lo, hi)
        w = np.zeros(hi - lo)
        w[t.start - lo : t.stop - lo] = t.weights
        kappa = calibration.power_gain(f0 + df * bins) / df
        idx_parts.append(bins)
        shape_parts.append(kappa * w)
        offsets.append(pos)
        valid.append(m)
        templates.append(t)
        pos += hi - lo
    if idx_parts:
        idx = np.concatenate(idx_parts)
        shape = np.concatenate(shape_parts)
    else:
        idx = np.zeros(0, dtype=np.int64)
        shape = np.zeros(0)
    return _Layout(idx, shape, np.asarray(offsets, dtype=np.int64), np.asarray(valid, dtype=np.int64), templates)


class _Fitter:
    """Vectorised maximum-likelihood fits of many windows at once."""

    max_iter = 100

    def __init__(self, data, shape, offsets, n_avg):
        self.d = np.asarray(data, dtype=np.float64)
        self.s = np.asarray(shape, dtype=np.float64)
        self.offsets = offsets
        sizes = np.diff(np.append(offsets, self.d.size))
        self.seg = np.repeat(np.arange(offsets.size), sizes)
        self.n = float(n_avg)
        self.s_max = np.maximum.reduceat(self.s, offsets) if self.d.size else np.zeros(0)
        if np.any(self.d < 0) or not np.all(np.isfinite(self.d)):
            raise DataError("PSD values must be finite and non-negative")

    def _sum(self, x):
        return np.add.reduceat(x, self.offsets)

    def _mu(self, A, b):
        return b[self.seg] + A[self.seg] * self.s

    def Q(self, A, b):
        r = self.d / self._mu(A, b) - 1.0
        return self._sum(r * r)

    def initial(self):
        """Neyman weighted least squares: exact on noise-free data."""
        wgt = 1.0 / np.maximum(self.d, np.finfo(float).tiny) ** 2
        s, d = self.s, self.d
        S00 = self._sum(wgt)
        S01 = self._sum(wgt * s)
        S11 = self._sum(wgt * s * s)
        T0 = self._sum(wgt * d)
        T1 = self._sum(wgt * s * d)
        det = S00 * S11 - S01 * S01
        with np.errstate(divide="ignore", invalid="ignore"):
            b = (S11 * T0 - S01 * T1) / det
            A = (S00 * T1 - S01 * T0) / det
        mean_d = self._sum(d) / self._sum(np.ones_like(d))
        bad = ~np.isfinite(A) | ~np.isfinite(b) | (b <= 0)
        A = np.where(bad, 0.0, A)
        b = np.where(bad, mean_d, b)
        # keep the start inside the admissible region
        b = np.maximum(b, 1.01 * np.maximum(0.0, -A * self.s_max) + 1e-300)
        return A, b

    def fit(self):
        """Joint Gauss-Newton fit of (A, b) in every window."""
        A, b = self.initial()
        q = self.Q(A, b)
        active = np.ones(A.size, dtype=bool)
        for _ in range(self.max_iter):
            mu = self._mu(A, b)
            ratio = self.d / mu
            r = ratio - 1.0
            jb = -ratio / mu
            jA = jb * self.s
            Hbb = self._sum(jb * jb)
            HAA = self._sum(jA * jA)
            HAb = self._sum(jA * jb)
            gb = self._sum(r * jb)
            gA = self._sum(r * jA)
            det = HAA * Hbb - HAb * HAb
            with np.errstate(divide="ignore", invalid="ignore"):
                dA = -(Hbb * gA - HAb * gb) / det
                db = -(HAA * gb - HAb * gA) / det
            dA = np.where(active & np.isfinite(dA), dA, 0.0)
            db = np.where(active & np.isfinite(db), db, 0.0)
            step = np.ones_like(A)
            for _ in range(60):
                A_new = A + step * dA
                b_new = b + step * db
                ok = b_new > np.maximum(0.0, -A_new * self.s_max)
                q_new = np.where(ok, self.Q(A_new, np.where(ok, b_new, b)), np.inf)
                good = ok & (q_new <= q * (1 + 1e-15) + 1e-300)
                if np.all(good | (step < 1e-12)):
                    break
                step = np.where(good, step, 0.5 * step)
            good = good & (step >= 1e-12)
            A = np.where(good, A_new, A)
            b = np.where(good, b_new, b)
            q = np.where(good, q_new, q)
            with np.errstate(divide="ignore", invalid="ignore"):
                a_scale = np.abs(A) + np.sqrt(np.abs(Hbb / det))
            small = (np.abs(step * dA) <= 1e-13 * a_scale) & (np.abs(step * db) <= 1e-13 * b)
            active &= ~(small | ~good)
            if not active.any():
                break
        self.converged = ~active
        return A, b, q

    def profile_b(self, A, b0):
        """Background minimising Q at fixed A (one-dimensional Gauss-Newton)."""
        b = np.array(b0, dtype=np.float64, copy=True)
        floor = np.maximum(0.0, -A * self.s_max)
        b = np.maximum(b, floor * 1.01 + 1e-300)
        q = self.Q(A, b)
        for _ in range(self.max_iter):
            mu = self._mu(A, b)
            ratio = self.d / mu
            jb = -ratio / mu
            g = self._sum((ratio - 1.0) * jb)
            h = self._sum(jb * jb)
            db = -g / h
            db = np.where(np.isfinite(db), db, 0.0)
            step = np.ones_like(b)
            for _ in range(60):
                b_new = b + step * db
                ok = b_new > floor
                q_new = np.where(ok, self.Q(A, np.where(ok, b_new, b)), np.inf)
                good = ok & (q_new <= q * (1 + 1e-15) + 1e-300)
                if np.all(good | (step < 1e-12)):
                    break
                step = np.where(good, step, 0.5 * step)
            good = good & (step >= 1e-12)
            b = np.where(good, b_new, b)
            q = np.where(good, q_new, q)
            if np.all(~good | (np.abs(step * db) <= 1e-13 * b)):
                break
        return b, q

    def sigma_A(self, A, b):
        """Asymptotic standard error of A from the Fisher information."""
        mu = self._mu(A, b)
        jb = -self.d / mu**2
        jA = jb * self.s
        Hbb = self._sum(jb * jb)
        HAA = self._sum(jA * jA)
        HAb = self._sum(jA * jb)
        det = HAA * Hbb - HAb * HAb
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.sqrt(Hbb / (self.n * det))

    def ts(self, A, A_hat, b_hat, q_hat):
        b, q = self.profile_b(A, b_hat)
        out = self.n * (q - q_hat)
        return np.where(A > A_hat, np.maximum(out, 0.0), 0.0), b

    def upper_limits(self, A_hat, b_hat, q_hat, threshold=TS_THRESHOLD, rtol=1e-4):
        """Smallest A >= A_hat with TS(A) = threshold, per window.

        Bracketing by step doubling, then the Illinois variant of regula
        falsi on sqrt(TS) (nearly linear in A), stopped at ``rtol``.
        """
        sig = self.sigma_A(A_hat, b_hat)
        sig = np.where(np.isfinite(sig) & (sig > 0), sig, np.abs(A_hat) + 1.0)
        lo = A_hat.copy()
        f_lo = np.full_like(lo, -math.sqrt(threshold))
        width = 2.0 * sig
        hi = A_hat + width
        ts_hi, _ = self.ts(hi, A_hat, b_hat, q_hat)
        flagged = np.zeros(lo.size, dtype=bool)
        for _ in range(80):
            need = ts_hi < threshold
            if not need.any():
                break
            lo = np.where(need, hi, lo)
            f_lo = np.where(need, np.sqrt(ts_hi) - math.sqrt(threshold), f_lo)
            width = np.where(need, 2.0 * width, width)
            hi = np.where(need, A_hat + width, hi)
            ts_new, _ = self.ts(hi, A_hat, b_hat, q_hat)
            ts_hi = np.where(need, ts_new, ts_hi)
        else:
            flagged = ts_hi < threshold
        f_hi = np.sqrt(ts_hi) - math.sqrt(threshold)
        side = np.zeros(lo.size, dtype=np.int8)
        atol = 1e-9 * sig
        for _ in range(200):
            done = (hi - lo) <= rtol * np.abs(hi) + atol
            if done.all():
                break
            denom = f_hi - f_lo
            with np.errstate(divide="ignore", invalid="ignore"):
                x = hi - f_hi * (hi - lo) / denom
            bad = ~np.isfinite(x) | (x <= lo) | (x >= hi)
            x = np.where(bad, 0.5 * (lo + hi), x)
            ts_x, _ = self.ts(x, A_hat, b_hat, q_hat)
            fx = np.sqrt(ts_x) - math.sqrt(threshold)
            below = fx < 0
            upd = ~done
            # Illinois: halve the retained end's value when it is kept twice
            lo_new = np.where(upd & below, x, lo)
            hi_new = np.where(upd & ~below, x, hi)
            f_lo_new = np.where(upd & below, fx, np.where(upd & ~below & (side == -1), 0.5 * f_lo, f_lo))
            f_hi_new = np.where(upd & ~below, fx, np.where(upd & below & (side == 1), 0.5 * f_hi, f_hi))
            side = np.where(upd, np.where(below, 1, -1), side).astype(np.int8)
            lo, hi, f_lo, f_hi = lo_new, hi_new, f_lo_new, f_hi_new
        a95 = 0.5 * (lo + hi)
        a95 = np.where(flagged, np.nan, a95)
        return a95, flagged


# --------------------------------------------------------------------------
# single-window API


@dataclass
class WindowFit:
    """Best fit of one window.

    ``data`` and ``shape`` (``kappa * w`` per bin) are kept so that the
    test statistic can be evaluated at any A.
    """

    a_hat: float
    b_hat: float
    lnL_max: float
    window: tuple
    n_averaged: int
    data: np.ndarray = field(repr=False)
    shape: np.ndarray = field(repr=False)
    template: AxionTemplate | None = field(default=None, repr=False)

    def _fitter(self):
        return _Fitter(self.data, self.shape, np.array([0]), self.n_averaged)

    @property
    def q_min(self) -> float:
        return -2.0 * self.lnL_max / self.n_averaged


def _check_averages(n_avg):
    n_avg = int(n_avg)
    if n_avg < MIN_AVERAGES:
        raise DataError(
            f"averaged PSD has n_averaged = {n_avg}; at least {MIN_AVERAGES} "
            "segments are needed for the Gaussian likelihood"
        )
    return n_avg


def fit_window(
    avg_psd: PowerSpectrum,
    template: AxionTemplate,
    calibration: Calibration | None = None,
    fraction: float = WINDOW_FRACTION,
    min_bins: int = MIN_WINDOW_BINS,
) -> WindowFit:
    """Maximum-likelihood ``(A, b)`` in the sliding window around ``template``.

    Minimises ``Q = sum (d/mu - 1)^2``: the Gaussian likelihood with
    variance ``mu^2/n`` without the ``log mu`` normalisation term, which
    would otherwise bias the fit on noise-free data by ~1/n.
    """
    n_avg = _check_averages(avg_psd.n_averaged)
    calibration = calibration or Calibration()
    if not (template.df == avg_psd.df and abs(template.f0 - avg_psd.f0) <= 1e-9 * avg_psd.df):
        raise DataError("template grid does not match the PSD grid")
    lo, hi = window_bounds(template, len(avg_psd), fraction, min_bins)
    bins = np.arange(lo, hi)
    w = np.zeros(hi - lo)
    w[template.start - lo : template.stop - lo] = template.weights
    shape = calibration.power_gain(avg_psd.f0 + avg_psd.df * bins) / avg_psd.df * w
    data = avg_psd.values[lo:hi].copy()
    fitter = _Fitter(data, shape, np.array([0]), n_avg)
    A, b, q = fitter.fit()
    if not fitter.converged[0]:
        raise NumericalError(
            f"fit did not converge in window [{lo}, {hi}); last A = {A[0]:.6g}, b = {b[0]:.6g}"
        )
    return WindowFit(float(A[0]), float(b[0]), float(-0.5 * n_avg * q[0]), (lo, hi), n_avg, data, shape, template)


def test_statistic(fit: WindowFit, A) -> np.ndarray | float:
    """One-sided profile likelihood ratio ``TS(A)``; zero for ``A <= a_hat``."""
    A_arr = np.atleast_1d(np.asarray(A, dtype=np.float64))
    if np.any(A_arr < 0):
        raise ValueError("A must be non-negative")
    fitter = fit._fitter()
    out = np.empty(A_arr.shape)
    b_prev = np.array([fit.b_hat])
    for i, a in enumerate(A_arr):
        ts, b_prev = fitter.ts(np.array([a]), np.array([fit.a_hat]), b_prev, np.array([fit.q_min]))
        out[i] = ts[0]
        if a <= fit.a_hat:
            b_prev = np.array([fit.b_hat])
    return out if np.ndim(A) else float(out[0])


@dataclass
class LimitPoint:
    f_a: float
    a95: float
    g95: float
    a_hat: float
    ts_at_zero: float
    a95_raw: float
    ts_curve: np.ndarray = field(repr=False, default=None)
    ts_grid: np.ndarray = field(repr=False, default=None)

    @property
    def mass_ev(self) -> float:
        return float(mass_ev(self.f_a))


def coupling_from_power(a95, constants: PhysicalConstants | None = None, flux_unit: float = 1.0):
    """``g = sqrt(A * flux_unit / (rho G^2 V^2 B^2))``; negative A maps to NaN."""
    constants = constants or PhysicalConstants()
    a = np.asarray(a95, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.sqrt(a * flux_unit / constants.flux_factor)


def _ts_zero(fitter, A_hat, b_hat, q_hat):
    zero = np.zeros_like(A_hat)
    _, q0 = fitter.profile_b(zero, b_hat)
    return np.where(A_hat > 0, np.maximum(fitter.n * (q0 - q_hat), 0.0), 0.0)


def upper_limit(fit: WindowFit, constants=None, flux_unit=1.0, threshold=TS_THRESHOLD, n_curve=16) -> LimitPoint:
    """95% one-sided upper limit on A and on the coupling for one window."""
    fitter = fit._fitter()
    A_hat = np.array([fit.a_hat])
    b_hat = np.array([fit.b_hat])
    q_hat = np.array([fit.q_min])
    raw, flagged = fitter.upper_limits(A_hat, b_hat, q_hat, threshold)
    if flagged[0]:
        raise NumericalError(f"TS never reached {threshold} for window {fit.window}")
    a95 = max(float(raw[0]), 0.0)
    grid = np.linspace(max(fit.a_hat, 0.0), 2 * max(a95, fit.a_hat, 0) + 1e-300, n_curve)
    curve = test_statistic(fit, grid)
    return LimitPoint(
        f_a=fit.template.f_a if fit.template else float("nan"),
        a95=a95,
        g95=float(coupling_from_power(a95, constants, flux_unit)),
        a_hat=fit.a_hat,
        ts_at_zero=float(_ts_zero(fitter, A_hat, b_hat, q_hat)[0]),
        a95_raw=float(raw[0]),
        ts_curve=curve,
        ts_grid=grid,
    )


# --------------------------------------------------------------------------
# scans


@dataclass
class LimitCurve:
    """Per-mass results of a scan; NaN rows are failed points (see ``errors``)."""

    frequencies: np.ndarray
    a95: np.ndarray
    g95: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    ts_at_zero: np.ndarray
    a95_raw: np.ndarray
    errors: dict = field(default_factory=dict)

    def __len__(self):
        return self.frequencies.size

    @property
    def mass_ev(self) -> np.ndarray:
        return mass_ev(self.frequencies)

    COLUMNS = ("mass_ev", "frequency_hz", "a95", "g95", "ts_at_zero")

    def rows(self):
        return np.column_stack([self.mass_ev, self.frequencies, self.a95, self.g95, self.ts_at_zero])

    def to_csv(self, path_or_file, header=True):
        _write_csv(path_or_file, self.COLUMNS if header else None, self.rows())

    def to_dict(self) -> dict:
        return {
            "mass_ev": self.mass_ev.tolist(),
            "frequency_hz": self.frequencies.tolist(),
            "a95": _nan_to_none(self.a95),
            "g95": _nan_to_none(self.g95),
            "a_hat": _nan_to_none(self.a_hat),
            "b_hat": _nan_to_none(self.b_hat),
            "ts_at_zero": _nan_to_none(self.ts_at_zero),
            "a95_raw": _nan_to_none(self.a95_raw),
            "errors": {str(k): v for k, v in self.errors.items()},
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def concatenate(cls, curves) -> "LimitCurve":
        curves = list(curves)
        errors, offset = {}, 0
        for c in curves:
            errors.update({k + offset: v for k, v in c.errors.items()})
            offset += len(c)
        cat = lambda name: np.concatenate([getattr(c, name) for c in curves]) if curves else np.zeros(0)
        return cls(*(cat(n) for n in ("frequencies", "a95", "g95", "a_hat", "b_hat", "ts_at_zero", "a95_raw")), errors)


def _nan_to_none(a):
    return [None if not np.isfinite(x) else float(x) for x in np.asarray(a, dtype=np.float64)]


def _write_csv(path_or_file, columns, rows):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        if columns:
            w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) if np.isfinite(x) else "nan" for x in row])
    finally:
        if own:
            fh.close()


def _scan_layout_values(layout, values, n_avg, n_masses, masses, errors, constants, flux_unit, threshold):
    m = n_masses
    out = {k: np.full(m, np.nan) for k in ("a95", "g95", "a_hat", "b_hat", "ts_at_zero", "a95_raw")}
    if layout.n_windows:
        fitter = _Fitter(values, layout.shape, layout.offsets, n_avg)
        A, b, q = fitter.fit()
        raw, flagged = fitter.upper_limits(A, b, q, threshold)
        tsz = _ts_zero(fitter, A, b, q)
        v = layout.valid
        out["a_hat"][v] = A
        out["b_hat"][v] = b
        out["a95_raw"][v] = raw
        out["a95"][v] = np.maximum(raw, 0.0)
        out["ts_at_zero"][v] = tsz
        for j in np.flatnonzero(flagged | ~fitter.converged):
            errors[int(v[j])] = (
                "TS never reached the threshold" if flagged[j] else "fit did not converge"
            )
            out["a95"][v[j]] = np.nan
        out["g95"] = coupling_from_power(out["a95"], constants, flux_unit)
    return LimitCurve(np.asarray(masses, dtype=np.float64), out["a95"], out["g95"], out["a_hat"],
                      out["b_hat"], out["ts_at_zero"], out["a95_raw"], errors)


def scan_masses(
    avg_psd: PowerSpectrum,
    mass_grid: Sequence[float],
    halo: _halo.HaloParams | None = None,
    calibration: Calibration | None = None,
    constants: PhysicalConstants | None = None,
    flux_unit: float = 1.0,
    threshold: float = TS_THRESHOLD,
    fraction: float = WINDOW_FRACTION,
    min_bins: int = MIN_WINDOW_BINS,
) -> LimitCurve:
    """Fit and limit every mass independently; failures become NaN rows."""
    n_avg = _check_averages(avg_psd.n_averaged)
    halo = halo or _halo.HaloParams()
    calibration = calibration or Calibration()
    masses = np.asarray(mass_grid, dtype=np.float64).reshape(-1)
    errors: dict = {}
    layout = _build_layout(masses, avg_psd.df, avg_psd.f0, len(avg_psd), halo, calibration, fraction, min_bins, errors)
    values = avg_psd.values[layout.idx]
    return _scan_layout_values(layout, values, n_avg, masses.size, masses, errors, constants, flux_unit, threshold)


def iter_scan(avg_psd, mass_grid, chunk_size=20_000, **kw) -> Iterator[LimitCurve]:
    """:func:`scan_masses` in chunks, for grids too large to hold at once."""
    masses = np.asarray(mass_grid, dtype=np.float64).reshape(-1)
    for start in range(0, masses.size, chunk_size):
        yield scan_masses(avg_psd, masses[start : start + chunk_size], **kw)


# --------------------------------------------------------------------------
# expected limits


@dataclass
class BrazilBand:
    """Percentiles of background-only limits per mass.

    ``g_quantiles[:, j]`` and ``a_quantiles[:, j]`` hold percentile
    ``percentiles[j]``.
    """

    frequencies: np.ndarray
    percentiles: tuple
    g_quantiles: np.ndarray
    a_quantiles: np.ndarray
    n_trials: int
    n_averaged: int

    @property
    def mass_ev(self):
        return mass_ev(self.frequencies)

    @property
    def median_g(self):
        return self.g_quantiles[:, self.percentiles.index(50.0)]

    @property
    def median_a(self):
        return self.a_quantiles[:, self.percentiles.index(50.0)]

    def columns(self):
        return ("mass_ev", "frequency_hz") + tuple(f"g95_p{p:g}" for p in self.percentiles)

    def rows(self):
        return np.column_stack([self.mass_ev, self.frequencies, self.g_quantiles])

    def to_csv(self, path):
        _write_csv(path, self.columns(), self.rows())

    def containment(self, curve: LimitCurve, lower=2.5, upper=97.5) -> np.ndarray:
        """Per mass: is the curve's g95 within [lower, upper] percentiles?"""
        lo = self.g_quantiles[:, self.percentiles.index(lower)]
        hi = self.g_quantiles[:, self.percentiles.index(upper)]
        g = curve.g95
        return (g >= lo) & (g <= hi)

    def to_dict(self):
        return {
            "frequency_hz": self.frequencies.tolist(),
            "mass_ev": self.mass_ev.tolist(),
            "percentiles": list(self.percentiles),
            "g_quantiles": self.g_quantiles.tolist(),
            "a_quantiles": self.a_quantiles.tolist(),
            "n_trials": self.n_trials,
            "n_averaged": self.n_averaged,
        }


def background_spectrum(noise_model, masses, sample_rate, segment_seconds=10.0, halo=None,
                        fraction=WINDOW_FRACTION, margin_bins=64) -> PowerSpectrum:
    """Expected noise PSD over the bins needed to scan ``masses``."""
    halo = halo or _halo.HaloParams()
    n = int(round(sample_rate * segment_seconds))
    df = sample_rate / n
    masses = np.asarray(masses, dtype=np.float64)
    f_top = _halo.max_frequency(float(masses.max()), halo) * (1 + fraction)
    k_lo = max(int(math.floor(masses.min() * (1 - fraction) / df)) - margin_bins, 0)
    k_hi = min(int(math.ceil(f_top / df)) + margin_bins, n // 2 + 1)
    return noise_model.expected_psd(sample_rate, n, k_lo, k_hi)


def _band_trials(args):
    (layout_state, mu, n_avg, seed, trials, constants, flux_unit, threshold, n_masses, masses) = args
    layout = layout_state
    uniq, inverse = np.unique(layout.idx, return_inverse=True)
    mu_u = mu[uniq]
    a_out = np.empty((len(trials), n_masses))
    for t_i, trial in enumerate(trials):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(trial)])))
        data = rng.gamma(n_avg, mu_u / n_avg)[inverse]
        curve = _scan_layout_values(layout, data, n_avg, n_masses, masses, {}, constants, flux_unit, threshold)
        a_out[t_i] = curve.a95
    return a_out


def brazil_band(
    background,
    n_averaged: int,
    mass_grid,
    n_trials: int = 100,
    seed: int = 0,
    halo=None,
    calibration=None,
    constants=None,
    flux_unit: float = 1.0,
    sample_rate: float = 1e7,
    segment_seconds: float = 10.0,
    threshold: float = TS_THRESHOLD,
    percentiles=BAND_PERCENTILES,
    workers: int = 1,
    return_trials: bool = False,
):
    """Expected-limit band from background-only pseudo-experiments.

    Each trial draws an averaged PSD bin by bin from
    ``Gamma(n, mean/n)`` (the exact law of an ``n``-segment average of
    periodograms of Gaussian noise) and runs the full scan on it.

    Parameters
    ----------
    background : NoiseModel or PowerSpectrum
        Source of the expected PSD.
    n_averaged : int
        Number of averaged segments in each pseudo-dataset.
    """
    n_trials = check_positive_int(n_trials, "n_trials")
    if n_trials < 100:
        raise ValueError(f"n_trials must be at least 100 for stable outer quantiles, got {n_trials}")
    n_avg = _check_averages(n_averaged)
    halo = halo or _halo.HaloParams()
    calibration = calibration or Calibration()
    masses = np.asarray(mass_grid, dtype=np.float64).reshape(-1)
    if isinstance(background, PowerSpectrum):
        spectrum = background
    else:
        spectrum = background_spectrum(background, masses, sample_rate, segment_seconds, halo)
    errors: dict = {}
    layout = _build_layout(masses, spectrum.df, spectrum.f0, len(spectrum), halo, calibration,
                           WINDOW_FRACTION, MIN_WINDOW_BINS, errors)
    chunks = split_range(n_trials, resolve_workers(workers))
    args = [
        (layout, spectrum.values, n_avg, seed, list(range(lo, hi)), constants, flux_unit, threshold, masses.size, masses)
        for lo, hi in chunks
    ]
    a_trials = np.concatenate(ordered_map(_band_trials, args, workers), axis=0)
    a_q = np.nanpercentile(a_trials, percentiles, axis=0).T if a_trials.size else np.zeros((masses.size, len(percentiles)))
    g_q = coupling_from_power(a_q, constants, flux_unit)
    band = BrazilBand(masses, tuple(float(p) for p in percentiles), g_q, a_q, n_trials, n_avg)
    if return_trials:
        return band, a_trials
    return band


class LimitScanner(BaseEstimator):
    """Estimator front end for mass scans and expected-limit bands.

    ``fit(avg_psd)`` scans ``mass_grid`` and stores ``curve_``.
    """

    def __init__(self, mass_grid=None, halo=None, calibration=None, constants=None,
                 flux_unit=1.0, threshold=TS_THRESHOLD, window_fraction=WINDOW_FRACTION,
                 min_window_bins=MIN_WINDOW_BINS):
        self.mass_grid = mass_grid
        self.halo = halo
        self.calibration = calibration
        self.constants = constants
        self.flux_unit = flux_unit
        self.threshold = threshold
        self.window_fraction = window_fraction
        self.min_window_bins = min_window_bins

    def _grid(self):
        return geometric_mass_grid() if self.mass_grid is None else np.asarray(self.mass_grid, dtype=np.float64)

    def fit(self, avg_psd, y=None):
        self.curve_ = scan_masses(
            avg_psd, self._grid(), self.halo, self.calibration, self.constants,
            self.flux_unit, self.threshold, self.window_fraction, self.min_window_bins,
        )
        return self

    def predict(self, avg_psd=None):
        """g95 per mass (re-scans if a new PSD is given)."""
        if avg_psd is not None:
            self.fit(avg_psd)
        return self.curve_.g95

    def band(self, background, n_averaged, n_trials=100, seed=0, **kw) -> BrazilBand:
        return brazil_band(
            background, n_averaged, self._grid(), n_trials, seed, self.halo,
            self.calibration, self.constants, self.flux_unit, threshold=self.threshold, **kw,
        )
