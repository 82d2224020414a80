"""Standard-halo-model speed distribution and the induced axion lineshape.

A dark-matter particle moving at lab-frame speed ``v`` converts to a
photon-like signal at ``nu = f_a * (1 + v**2 / (2 c**2))``; the lineshape
is the lab-frame speed distribution pushed through that map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import constants, special

C_KMS = constants.c / 1e3
#: Hard ceiling on the lineshape support, as a fraction of f_a.
MAX_SUPPORT_FRACTION = 20e-6


@dataclass(frozen=True)
class HaloParams:
    """Halo velocity parameters in km/s.

    ``v0`` is the most probable galactic-frame speed, ``v_obs`` the speed
    of the laboratory through the halo.  ``v_esc`` truncates the lab-frame
    speed at ``v_esc + v_obs``; ``None`` keeps the Maxwellian tail up to the
    support ceiling.
    """

    v0: float = 220.0
    v_obs: float = 232.0
    v_esc: float | None = 544.0

    def __post_init__(self):
        if not self.v0 > 0:
            raise ValueError("v0 must be positive")
        if self.v_obs < 0:
            raise ValueError("v_obs must be non-negative")
        if self.v_esc is not None and not self.v_esc > 0:
            raise ValueError("v_esc must be positive or None")

    @property
    def v_max(self) -> float:
        ceiling = C_KMS * math.sqrt(2 * MAX_SUPPORT_FRACTION)
        if self.v_esc is None:
            return ceiling
        return min(self.v_esc + self.v_obs, ceiling)


def _raw_speed_cdf(v, halo: HaloParams):
    v = np.asarray(v, dtype=np.float64)
    v0, vo = halo.v0, halo.v_obs
    if vo == 0:
        x = v / v0
        return special.erf(x) - 2 * x * np.exp(-x * x) / math.sqrt(math.pi)
    u = (v - vo) / v0
    up = (v + vo) / v0
    return 0.5 * (special.erf(u) + special.erf(up)) + (
        v0 / (2 * math.sqrt(math.pi) * vo)
    ) * (np.exp(-up * up) - np.exp(-u * u))


def _raw_speed_pdf(v, halo: HaloParams):
    v = np.asarray(v, dtype=np.float64)
    v0, vo = halo.v0, halo.v_obs
    if vo == 0:
        return 4 * v * v / (math.sqrt(math.pi) * v0**3) * np.exp(-(v / v0) ** 2)
    return v / (math.sqrt(math.pi) * v0 * vo) * (
        np.exp(-((v - vo) / v0) ** 2) - np.exp(-((v + vo) / v0) ** 2)
    )


def speed_cdf(v, halo: HaloParams):
    """Lab-frame speed CDF, truncated at ``halo.v_max`` and renormalised."""
    vmax = halo.v_max
    norm = float(_raw_speed_cdf(vmax, halo))
    vv = np.clip(np.asarray(v, dtype=np.float64), 0.0, vmax)
    return _raw_speed_cdf(vv, halo) / norm


def speed_pdf(v, halo: HaloParams):
    vmax = halo.v_max
    norm = float(_raw_speed_cdf(vmax, halo))
    v = np.asarray(v, dtype=np.float64)
    return np.where((v >= 0) & (v <= vmax), _raw_speed_pdf(v, halo) / norm, 0.0)


def frequency_cdf(nu, f_a: float, halo: HaloParams):
    """Probability that the signal frequency is below ``nu``."""
    frac = np.maximum(np.asarray(nu, dtype=np.float64) / f_a - 1.0, 0.0)
    return speed_cdf(C_KMS * np.sqrt(2.0 * frac), halo)


def max_frequency(f_a: float, halo: HaloParams) -> float:
    return f_a * (1.0 + 0.5 * (halo.v_max / C_KMS) ** 2)


def mean_fractional_offset(halo: HaloParams) -> float:
    """<v^2> / (2 c^2) from the closed-form moments (no binning)."""
    from scipy import integrate

    second_moment, _ = integrate.quad(
        lambda v: v * v * float(speed_pdf(v, halo)), 0.0, halo.v_max, limit=200
    )
    return second_moment / (2 * C_KMS**2)


def bin_weights(f_a: float, df: float, f0: float, halo: HaloParams):
    """Integrate the lineshape over the bins of a uniform grid.

    Bin ``k`` is centred on ``f0 + k*df``.  The first bin is the first one
    whose centre is at or above ``f_a``; probability mass between ``f_a``
    and that bin's lower edge is folded into it, so no weight sits at a
    frequency below the axion rest frequency.

    Returns
    -------
    start : int
        Index of the first supported bin.
    weights : ndarray
        Non-negative weights summing to one.
    """
    nu_max = max_frequency(f_a, halo)
    start = math.ceil((f_a - f0) / df - 1e-9)
    stop = math.floor((nu_max - f0) / df + 0.5)
    stop = max(stop, start)
    centres = f0 + df * np.arange(start, stop + 1)
    lower = np.maximum(centres - 0.5 * df, f_a)
    lower[0] = f_a
    upper = np.minimum(centres + 0.5 * df, nu_max)
    upper[-1] = nu_max
    cdf_hi = frequency_cdf(upper, f_a, halo)
    cdf_lo = frequency_cdf(lower, f_a, halo)
    weights = np.maximum(cdf_hi - cdf_lo, 0.0)
    total = weights.sum()
    if not total > 0:
        weights = np.zeros_like(weights)
        weights[0] = 1.0
        return start, weights
    return start, weights / total
