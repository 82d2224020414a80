"""Seeded generator of detector-like datasets.

Produces sample-aligned (injected, SQUID) pairs for training/validation
and SQUID-only science runs.  All randomness is keyed by
``(seed, stream, block)`` where a block is one canonical second of samples,
so any chunk of the stream can be produced independently and the output
does not depend on how the work is split.

Tone amplitudes are peak-to-peak millivolts throughout (the usual
signal-generator setting): a 50 mV tone swings between -25 and +25 mV.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import halo as _halo
from .model import (
    DEFAULT_SAMPLE_RATE,
    MV_PER_COUNT,
    ChannelRole,
    PowerSpectrum,
    SampleSeries,
    quantize_millivolts,
)
from .parallel import ordered_map, resolve_workers, split_range

STANDARD_AMPLITUDE_MV = 50.0
WEAK_AMPLITUDE_MV = 10.0

# stream identifiers for the keyed generators
_WHITE = 1
_PINK = 2
_LINES = 3
_PLANT = 4
_AUGMENT = 5

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ToneStep:
    frequency: float
    amplitude: float
    duration: float


@dataclass(frozen=True)
class InjectionSchedule:
    """Ordered list of injected tones, each held for ``duration`` seconds."""

    entries: tuple = ()

    def __post_init__(self):
        steps = tuple(e if isinstance(e, ToneStep) else ToneStep(*e) for e in self.entries)
        for step in steps:
            if not step.frequency > 0:
                raise ValueError(f"tone frequency must be positive, got {step.frequency}")
            if not step.amplitude > 0:
                raise ValueError("tone amplitudes must be positive")
            if not step.duration > 0:
                raise ValueError("tone durations must be positive")
        object.__setattr__(self, "entries", steps)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def total_duration(self) -> float:
        return float(sum(e.duration for e in self.entries))

    def check_rate(self, sample_rate: float) -> None:
        nyquist = sample_rate / 2
        for e in self.entries:
            if e.frequency >= nyquist:
                raise ValueError(
                    f"tone at {e.frequency} Hz is not below Nyquist ({nyquist} Hz)"
                )

    def boundaries(self, sample_rate: float) -> np.ndarray:
        """Sample index at which each entry starts, plus the final end."""
        t = np.concatenate([[0.0], np.cumsum([e.duration for e in self.entries])])
        return np.round(t * sample_rate).astype(np.int64)

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionSchedule":
        return cls(tuple(ToneStep(**e) for e in d["entries"]))


def default_schedule(
    mode: str = "standard",
    dwell: float = 1.0,
    n_tones: int = 38,
    f_start: float = 1100.0,
    f_stop: float = 4.9e6,
) -> InjectionSchedule:
    """Geometric sweep of injected tones between the published endpoints.

    Frequencies are rounded to whole hertz so that every tone sits on the
    1 Hz grid of one-second scoring segments.
    """
    amplitude = {"standard": STANDARD_AMPLITUDE_MV, "weak": WEAK_AMPLITUDE_MV}.get(mode)
    if amplitude is None:
        raise ValueError(f"mode must be 'standard' or 'weak', not {mode!r}")
    freqs = np.round(np.geomspace(f_start, f_stop, n_tones))
    return InjectionSchedule(tuple(ToneStep(float(f), amplitude, dwell) for f in freqs))


def band_schedule(f_low, f_high, n_tones, amplitude=STANDARD_AMPLITUDE_MV, dwell=1.0):
    """Linear sweep over a band, rounded to whole hertz."""
    freqs = np.round(np.linspace(f_low, f_high, n_tones))
    return InjectionSchedule(tuple(ToneStep(float(f), amplitude, dwell) for f in freqs))


# --------------------------------------------------------------------------
# gain and noise


@dataclass(frozen=True)
class BandpassGain:
    """First-order high-pass times first-order low-pass amplitude response."""

    f_low: float = 1e3
    f_high: float = 5e6

    def __call__(self, f):
        f = np.asarray(f, dtype=np.float64)
        x = f / self.f_low
        return x / np.sqrt(1 + x * x) / np.sqrt(1 + (f / self.f_high) ** 2)

    def to_dict(self):
        return {"kind": "bandpass", "f_low": self.f_low, "f_high": self.f_high}


@dataclass(frozen=True)
class UnityGain:
    def __call__(self, f):
        return np.ones_like(np.asarray(f, dtype=np.float64))

    def to_dict(self):
        return {"kind": "unity"}


def gain_from_dict(d):
    if d is None:
        return BandpassGain()
    kind = d.get("kind", "bandpass")
    if kind == "unity":
        return UnityGain()
    if kind == "bandpass":
        return BandpassGain(float(d.get("f_low", 1e3)), float(d.get("f_high", 5e6)))
    raise ValueError(f"unknown gain kind {kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    """SQUID-channel noise and response.

    Parameters
    ----------
    white_sigma : float
        Standard deviation of white Gaussian noise, mV.
    pink_amplitude : float
        RMS of the 1/f component, mV (0 disables it).
    lines : sequence of (frequency, amplitude)
        Interference tones, amplitude peak-to-peak mV.
    gain : callable
        Amplitude response applied to injected and planted signals.
    seed : int
        64-bit seed for every random stream.
    pink_rows : int
        Number of octave rows in the 1/f summation.
    """

    white_sigma: float = 5.0
    pink_amplitude: float = 0.0
    lines: tuple = ()
    gain: object = field(default_factory=BandpassGain)
    seed: int = 0
    pink_rows: int = 16

    def __post_init__(self):
        if self.white_sigma < 0 or self.pink_amplitude < 0:
            raise ValueError("noise amplitudes must be non-negative")
        object.__setattr__(self, "lines", tuple((float(f), float(a)) for f, a in self.lines))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "seed", int(self.seed))
        if self.pink_rows < 1:
            raise ValueError("pink_rows must be >= 1")

    def check_rate(self, sample_rate: float) -> None:
        for f, _ in self.lines:
            if not 0 < f < sample_rate / 2:
                raise ValueError(f"interference line at {f} Hz is not below Nyquist")

    def to_dict(self) -> dict:
        return {
            "white_sigma": self.white_sigma,
            "pink_amplitude": self.pink_amplitude,
            "lines": [list(x) for x in self.lines],
            "gain": self.gain.to_dict(),
            "seed": self.seed,
            "pink_rows": self.pink_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        d = dict(d)
        d["gain"] = gain_from_dict(d.get("gain"))
        d["lines"] = tuple(tuple(x) for x in d.get("lines", ()))
        return cls(**d)

    def expected_psd(
        self,
        sample_rate: float,
        segment_samples: int,
        k_lo: int = 0,
        k_hi: int | None = None,
        quantized: bool = True,
    ) -> PowerSpectrum:
        """Expected one-sided periodogram of the noise, bins ``[k_lo, k_hi)``.

        Includes the rounding noise of the 8-bit digitizer when
        ``quantized`` (valid while the white noise spans many counts).
        """
        n = int(segment_samples)
        if k_hi is None:
            k_hi = n // 2 + 1
        df = sample_rate / n
        k = np.arange(k_lo, k_hi, dtype=np.float64)
        var = self.white_sigma**2 + (MV_PER_COUNT**2 / 12 if quantized else 0.0)
        psd = np.full(k.shape, 2 * var / sample_rate)
        if self.pink_amplitude > 0:
            row_var = self.pink_amplitude**2 / self.pink_rows
            x = np.pi * k / n
            sin_x = np.sin(x)
            for r in range(self.pink_rows):
                hold = 2**r
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = np.where(sin_x == 0, hold, np.sin(hold * x) / sin_x)
                psd += 2 * row_var / (sample_rate * hold) * ratio**2
        for f, amp in self.lines:
            a_pk = amp / 2
            delta = (k * df - f) / sample_rate
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.sin(np.pi * delta)
                dirichlet = np.where(
                    np.abs(s) < 1e-300, float(n), np.sin(np.pi * delta * n) / s
                )
            psd += a_pk**2 / 4 * 2 / (sample_rate * n) * dirichlet**2
        edge = (k == 0) | (k == n / 2)
        psd[edge] /= 2
        return PowerSpectrum(psd, df=df, f0=k_lo * df, n_averaged=1)


# --------------------------------------------------------------------------
# planted axion-like signals


@dataclass(frozen=True)
class PlantedSignal:
    """Persistent signal added to a science run.

    With ``lineshape=False`` this is a pure tone at ``frequency``.  With
    ``lineshape=True`` the power is spread over tones on a ``grid_df``
    frequency grid, weighted by the halo lineshape of an axion whose rest
    frequency is ``frequency``; each tone gets a seeded random phase.
    """

    frequency: float
    amplitude: float
    lineshape: bool = False
    halo: _halo.HaloParams = field(default_factory=_halo.HaloParams)
    grid_df: float = 0.1

    @property
    def power(self) -> float:
        """Mean-square signal power before the detector gain, mV^2."""
        return self.amplitude**2 / 8

    @classmethod
    def from_power(cls, frequency, power, **kw) -> "PlantedSignal":
        return cls(frequency, math.sqrt(8 * power), **kw)

    def components(self, seed: int):
        """Return ``(frequencies, peak_amplitudes, phases_in_cycles)``."""
        if not self.lineshape:
            return (
                np.array([self.frequency]),
                np.array([self.amplitude / 2]),
                np.zeros(1),
            )
        start, weights = _halo.bin_weights(self.frequency, self.grid_df, 0.0, self.halo)
        keep = weights > 0
        freqs = self.grid_df * np.arange(start, start + len(weights))[keep]
        amps = np.sqrt(2 * self.power * weights[keep])
        rng = _keyed_rng(seed, _PLANT, 0)
        phases = rng.random(len(freqs))
        return freqs, amps, phases

    def to_dict(self):
        d = asdict(self)
        d["halo"] = asdict(self.halo)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["halo"] = _halo.HaloParams(**d.get("halo", {}))
        return cls(**d)


# --------------------------------------------------------------------------
# keyed randomness


def _keyed_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(stream), int(block)])
    return np.random.Generator(np.random.SFC64(ss))


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _hash_uniform(seed: int, stream: int, row: int, counters: np.ndarray) -> np.ndarray:
    """Uniform values in [-1, 1) addressed by an integer counter."""
    key = _splitmix64(np.array([seed], dtype=np.uint64))[0]
    key = _splitmix64(np.array([key ^ np.uint64(stream * 0x100 + row)], dtype=np.uint64))[0]
    with np.errstate(over="ignore"):
        z = _splitmix64(counters.astype(np.uint64) ^ key)
    return (z >> np.uint64(11)).astype(np.float64) * (2.0**-52) - 1.0


# --------------------------------------------------------------------------
# waveform pieces


def _cycles_at(freq: float, index: int, sample_rate: float) -> float:
    """Fractional number of cycles of ``freq`` elapsed at sample ``index``."""
    return float((Fraction(freq) * index / Fraction(sample_rate)) % 1)


def _sine(freq, start, n, sample_rate, phase=0.0):
    cyc = np.arange(n, dtype=np.float64)
    cyc *= freq / sample_rate
    cyc += _cycles_at(freq, start, sample_rate) + phase
    cyc -= np.floor(cyc)
    cyc *= 2 * np.pi
    return np.sin(cyc, out=cyc)


def _pink(noise: NoiseModel, start: int, n: int) -> np.ndarray:
    """Voss-McCartney sum of octave-held random rows, addressed by sample index."""
    out = np.zeros(n)
    scale = noise.pink_amplitude / math.sqrt(noise.pink_rows / 3)
    for row in range(noise.pink_rows):
        hold = 1 << row
        first = start >> row
        last = (start + n - 1) >> row
        vals = _hash_uniform(noise.seed, _PINK, row, np.arange(first, last + 1, dtype=np.int64))
        expanded = np.repeat(vals, hold)
        offset = start - (first << row)
        out += expanded[offset : offset + n]
    out *= scale
    return out


def _lines(noise: NoiseModel, start, n, sample_rate):
    out = np.zeros(n)
    if not noise.lines:
        return out
    phases = _hash_uniform(noise.seed, _LINES, 0, np.arange(len(noise.lines))) * 0.5 + 0.5
    for (f, amp), ph in zip(noise.lines, phases):
        out += (amp / 2) * _sine(f, start, n, sample_rate, ph)
    return out


def _noise_block(noise: NoiseModel, block: int, start: int, n: int, sample_rate) -> np.ndarray:
    if noise.white_sigma > 0:
        out = _keyed_rng(noise.seed, _WHITE, block).standard_normal(n)
        out *= noise.white_sigma
    else:
        out = np.zeros(n)
    if noise.pink_amplitude > 0:
        out += _pink(noise, start, n)
    if noise.lines:
        out += _lines(noise, start, n, sample_rate)
    return out


def _planted_block(components, gain, start, n, sample_rate, step=256):
    freqs, amps, phases = components
    amps = amps * gain(freqs)
    if len(freqs) == 1:
        return amps[0] * _sine(freqs[0], start, n, sample_rate, phases[0])
    # sum of closely spaced tones = slowly varying complex envelope times a
    # carrier; the envelope is evaluated on a coarse grid and interpolated
    f_ref = freqs[0]
    offsets = freqs - f_ref
    n_coarse = -(-n // step) + 1
    t = (start + step * np.arange(n_coarse)) / sample_rate
    cyc = np.outer(t, offsets) + phases
    cyc -= np.floor(cyc)
    env = np.exp(2j * np.pi * cyc) @ amps.astype(np.complex128)
    ramp = np.arange(step) / step
    lin = (env[:-1, None] + (env[1:] - env[:-1])[:, None] * ramp).ravel()[:n]
    carrier = np.arange(n, dtype=np.float64)
    carrier *= f_ref / sample_rate
    carrier += _cycles_at(f_ref, start, sample_rate)
    carrier -= np.floor(carrier)
    carrier *= 2 * np.pi
    return lin.real * np.cos(carrier) - lin.imag * np.sin(carrier)


# --------------------------------------------------------------------------
# block generation


class PairBlock(NamedTuple):
    start: int
    injected: np.ndarray
    squid: np.ndarray
    saturated: int


class ScienceBlock(NamedTuple):
    start: int
    squid: np.ndarray
    saturated: int


def _total_samples(seconds, sample_rate) -> int:
    if not seconds > 0:
        raise ValueError("seconds must be positive")
    n = seconds * sample_rate
    if abs(n - round(n)) > 1e-6:
        raise ValueError("seconds * sample_rate must be a whole number of samples")
    return int(round(n))


def _block_ranges(total, block_samples, first=0, last=None):
    n_blocks = -(-total // block_samples)
    last = n_blocks if last is None else last
    for b in range(first, last):
        start = b * block_samples
        yield b, start, min(block_samples, total - start)


def pair_block(schedule, noise, sample_rate, block, start, n) -> PairBlock:
    bounds = schedule.boundaries(sample_rate)
    clean = np.zeros(n)
    squid_sig = np.zeros(n)
    lo = int(np.searchsorted(bounds, start, side="right")) - 1
    for i in range(max(lo, 0), len(schedule)):
        a, b = max(bounds[i], start), min(bounds[i + 1], start + n)
        if a >= start + n:
            break
        if b <= a:
            continue
        step = schedule.entries[i]
        wave = _sine(step.frequency, a, b - a, sample_rate)
        wave *= step.amplitude / 2
        clean[a - start : b - start] = wave
        squid_sig[a - start : b - start] = wave * float(noise.gain(step.frequency))
    injected, sat_i = quantize_millivolts(clean, return_saturation=True)
    squid_sig += _noise_block(noise, block, start, n, sample_rate)
    squid, sat_s = quantize_millivolts(squid_sig, return_saturation=True)
    return PairBlock(start, injected, squid, sat_i + sat_s)


def science_block(noise, sample_rate, block, start, n, planted=None, components=None):
    signal = _noise_block(noise, block, start, n, sample_rate)
    if planted is not None:
        if components is None:
            components = planted.components(noise.seed)
        signal += _planted_block(components, noise.gain, start, n, sample_rate)
    squid, sat = quantize_millivolts(signal, return_saturation=True)
    return ScienceBlock(start, squid, sat)


def iter_pair_blocks(
    schedule: InjectionSchedule,
    noise: NoiseModel,
    seconds: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    first_block: int = 0,
    last_block: int | None = None,
) -> Iterator[PairBlock]:
    """Yield one-second blocks of an (injected, SQUID) pair."""
    total = _total_samples(seconds, sample_rate)
    _check_pair_inputs(schedule, noise, seconds, sample_rate)
    for b, start, n in _block_ranges(total, int(sample_rate), first_block, last_block):
        yield pair_block(schedule, noise, sample_rate, b, start, n)


def iter_science_blocks(
    noise: NoiseModel,
    seconds: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    planted: PlantedSignal | None = None,
    first_block: int = 0,
    last_block: int | None = None,
) -> Iterator[ScienceBlock]:
    """Yield one-second blocks of a SQUID-only science run."""
    total = _total_samples(seconds, sample_rate)
    _check_science_inputs(noise, sample_rate, planted)
    components = planted.components(noise.seed) if planted is not None else None
    for b, start, n in _block_ranges(total, int(sample_rate), first_block, last_block):
        yield science_block(noise, sample_rate, b, start, n, planted, components)


def _check_pair_inputs(schedule, noise, seconds, sample_rate):
    if sample_rate != int(sample_rate):
        raise ValueError("sample_rate must be a whole number of hertz")
    if schedule.total_duration < seconds:
        raise ValueError(
            f"schedule covers {schedule.total_duration} s but {seconds} s were requested"
        )
    schedule.check_rate(sample_rate)
    noise.check_rate(sample_rate)


def _check_science_inputs(noise, sample_rate, planted):
    if sample_rate != int(sample_rate):
        raise ValueError("sample_rate must be a whole number of hertz")
    noise.check_rate(sample_rate)
    if planted is not None and not 0 < planted.frequency < sample_rate / 2:
        raise ValueError(
            f"planted frequency {planted.frequency} Hz is not below Nyquist ({sample_rate / 2} Hz)"
        )


def _pair_chunk(args):
    schedule, noise, seconds, rate, lo, hi = args
    blocks = list(iter_pair_blocks(schedule, noise, seconds, rate, lo, hi))
    return (
        np.concatenate([b.injected for b in blocks]),
        np.concatenate([b.squid for b in blocks]),
    )


def _science_chunk(args):
    noise, seconds, rate, planted, lo, hi = args
    blocks = list(iter_science_blocks(noise, seconds, rate, planted, lo, hi))
    return np.concatenate([b.squid for b in blocks])


def synth_pair(
    schedule: InjectionSchedule,
    noise: NoiseModel,
    seconds: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    workers: int = 1,
):
    """Generate an aligned ``(injected, squid)`` pair held in memory.

    The injected channel is the quantized clean sinusoid; the SQUID channel
    is the quantized sum of the gain-shaped sinusoid and noise.
    """
    total = _total_samples(seconds, sample_rate)
    _check_pair_inputs(schedule, noise, seconds, sample_rate)
    n_blocks = -(-total // int(sample_rate))
    chunks = split_range(n_blocks, resolve_workers(workers))
    parts = ordered_map(
        _pair_chunk,
        [(schedule, noise, seconds, sample_rate, lo, hi) for lo, hi in chunks],
        workers,
    )
    injected = np.concatenate([p[0] for p in parts])
    squid = np.concatenate([p[1] for p in parts])
    return (
        SampleSeries(injected, sample_rate, ChannelRole.INJECTED),
        SampleSeries(squid, sample_rate, ChannelRole.SQUID),
    )


def synth_science(
    noise: NoiseModel,
    seconds: float,
    planted: PlantedSignal | None = None,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    workers: int = 1,
) -> SampleSeries:
    """Generate a SQUID-only science run held in memory."""
    total = _total_samples(seconds, sample_rate)
    _check_science_inputs(noise, sample_rate, planted)
    n_blocks = -(-total // int(sample_rate))
    chunks = split_range(n_blocks, resolve_workers(workers))
    parts = ordered_map(
        _science_chunk,
        [(noise, seconds, sample_rate, planted, lo, hi) for lo, hi in chunks],
        workers,
    )
    return SampleSeries(np.concatenate(parts), sample_rate, ChannelRole.SQUID)


def gaussian_perturbation(seed: int, segment: int, n: int) -> np.ndarray:
    """Standard-normal draws for the noise-robustness study, keyed by segment."""
    return _keyed_rng(seed, _AUGMENT, segment).standard_normal(n)
