"""Core data types and digitizer unit conversions.

Raw samples are signed 8-bit digitizer counts; one count is 40/128 mV.
Conversion to millivolts happens only at processing boundaries.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

#: Millivolts per digitizer count (40/128, exactly representable).
MV_PER_COUNT = 40.0 / 128.0
INT8_MIN = -128
INT8_MAX = 127
DEFAULT_SAMPLE_RATE = 10_000_000


class ChannelRole(str, enum.Enum):
    SQUID = "squid"
    INJECTED = "injected"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.flags.writeable:
        # private read-only copy; callers keep their buffer
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SampleSeries:
    """One channel of raw signed 8-bit samples.

    Parameters
    ----------
    samples : array_like of int
        Digitizer counts, each in [-128, 127].
    sample_rate : float
        Sampling rate in Hz.
    channel_role : ChannelRole
    start_index : int
        Offset of the first sample within the parent dataset.
    """

    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE
    channel_role: ChannelRole = ChannelRole.SQUID
    start_index: int = 0

    def __post_init__(self):
        raw = np.asarray(self.samples)
        if raw.dtype != np.int8 and raw.size:
            if not np.issubdtype(raw.dtype, np.integer) and not np.all(raw == np.round(raw)):
                raise ValueError("samples must be integers")
            if raw.min() < INT8_MIN or raw.max() > INT8_MAX:
                raise ValueError("samples must lie in [-128, 127]")
        object.__setattr__(self, "samples", _frozen_array(raw, np.int8))
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "channel_role", ChannelRole(self.channel_role))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def millivolts(self) -> np.ndarray:
        return raw_to_millivolts(self.samples)


@dataclass(frozen=True, eq=False)
class FloatSeries:
    """Real-valued series in millivolts, e.g. the output of a denoiser."""

    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE
    start_index: int = 0

    def __post_init__(self):
        arr = _frozen_array(np.asarray(self.samples, dtype=np.float64), np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("FloatSeries values must be finite")
        object.__setattr__(self, "samples", arr)
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def millivolts(self) -> np.ndarray:
        return self.samples


@dataclass(frozen=True)
class PhysicalConstants:
    """Detector constants entering the expected axion flux power.

    ``rho_dm`` is a convention (0.4 GeV/cm^3), not a measured input.
    """

    geometric_coupling: float = 0.0217
    volume_cm3: float = 890.0
    b_max_tesla: float = 1.0
    rho_dm_gev_cm3: float = 0.4

    def __post_init__(self):
        for name in ("geometric_coupling", "volume_cm3", "b_max_tesla", "rho_dm_gev_cm3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def flux_factor(self) -> float:
        """rho * G^2 * V^2 * B^2, so that A = g^2 * flux_factor."""
        return (
            self.rho_dm_gev_cm3
            * self.geometric_coupling**2
            * self.volume_cm3**2
            * self.b_max_tesla**2
        )


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    """One-sided power spectral density on a uniform grid.

    ``values[k]`` is the power density (mV^2/Hz) at frequency ``f0 + k*df``.
    """

    values: np.ndarray
    df: float
    f0: float = 0.0
    n_averaged: int = 1

    def __post_init__(self):
        vals = _frozen_array(np.asarray(self.values, dtype=np.float64), np.float64)
        if vals.ndim != 1:
            raise ValueError("PowerSpectrum values must be one-dimensional")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("PowerSpectrum values must be finite and non-negative")
        object.__setattr__(self, "values", vals)
        if not self.df > 0:
            raise ValueError("df must be positive")
        if int(self.n_averaged) < 1:
            raise ValueError("n_averaged must be >= 1")
        object.__setattr__(self, "n_averaged", int(self.n_averaged))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def frequencies(self) -> np.ndarray:
        return self.f0 + self.df * np.arange(len(self))

    def bin_of(self, frequency: float) -> int:
        return int(round((frequency - self.f0) / self.df))

    def same_grid(self, other: "PowerSpectrum") -> bool:
        return (
            len(self) == len(other) and self.df == other.df and self.f0 == other.f0
        )


def raw_to_millivolts(raw):
    """Convert digitizer counts to millivolts (exact: counts * 0.3125)."""
    arr = np.asarray(raw)
    if arr.ndim == 0:
        value = int(arr)
        if not INT8_MIN <= value <= INT8_MAX:
            raise ValueError(f"raw sample {value} outside [-128, 127]")
        return value * MV_PER_COUNT
    return arr.astype(np.float64) * MV_PER_COUNT


def quantize_millivolts(v, return_saturation: bool = False):
    """Convert millivolts to digitizer counts.

    Rounds half away from zero and clamps silently to [-128, 127].
    With ``return_saturation=True`` also returns the number of clamped
    samples.
    """
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    scaled = arr / MV_PER_COUNT
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    saturated = int(np.count_nonzero((rounded < INT8_MIN) | (rounded > INT8_MAX)))
    rounded = np.clip(rounded, INT8_MIN, INT8_MAX)
    out = rounded.astype(np.int8)
    if arr.ndim == 0:
        out = int(out)
    if return_saturation:
        return out, saturated
    return out


def as_millivolts(x, sample_rate=None):
    """Return ``(values_mV, sample_rate)`` for a series or array-like.

    Bare arrays are taken to be in millivolts already; integer arrays are
    not reinterpreted as counts.
    """
    if isinstance(x, (SampleSeries, FloatSeries)):
        return x.millivolts(), x.sample_rate
    arr = np.asarray(x, dtype=np.float64)
    return arr, (DEFAULT_SAMPLE_RATE if sample_rate is None else sample_rate)
