"""Periodograms and PSD averaging.

Convention: one-sided power per hertz with a rectangular window,
``P[k] = 2 |X[k]|^2 / (fs N)`` except at DC and Nyquist, which are not
doubled.  With this convention ``mean(x**2) == sum(P) * df`` and white
noise of variance ``s2`` has a flat level ``2 s2 / fs``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from ._validation import check_positive, check_positive_int, check_series
from .exceptions import DataError
from .model import DEFAULT_SAMPLE_RATE, MV_PER_COUNT, PowerSpectrum
from .parallel import ordered_map, resolve_workers, split_range


@dataclass(frozen=True)
class SegmentPlan:
    """How a series is cut into periodogram segments.

    ``stride`` selects every ``stride``-th segment (1 = fine, 10 = coarse).
    """

    segment_seconds: float = 1.0
    sample_rate: float = DEFAULT_SAMPLE_RATE
    stride: int = 1

    def __post_init__(self):
        check_positive(self.segment_seconds, "segment_seconds")
        check_positive(self.sample_rate, "sample_rate")
        check_positive_int(self.stride, "stride")
        n = self.segment_seconds * self.sample_rate
        if abs(n - round(n)) > 1e-9 * max(n, 1) or round(n) < 1:
            raise ValueError(
                f"segment of {self.segment_seconds} s at {self.sample_rate} Hz "
                "is not a positive whole number of samples"
            )

    @property
    def samples_per_segment(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    @property
    def df(self) -> float:
        return self.sample_rate / self.samples_per_segment

    def n_segments(self, n_samples: int) -> int:
        return n_samples // self.samples_per_segment

    def indices(self, n_samples: int) -> range:
        return range(0, self.n_segments(n_samples), self.stride)


def _power(x: np.ndarray, sample_rate: float, k_lo=0, k_hi=None) -> np.ndarray:
    n = x.shape[-1]
    spec = sp_fft.rfft(x, axis=-1)
    if k_lo or k_hi is not None:
        spec = spec[..., k_lo:k_hi]
    p = spec.real**2
    p += spec.imag**2
    p *= 2.0 / (sample_rate * n)
    k_hi_eff = n // 2 + 1 if k_hi is None else k_hi
    if k_lo == 0:
        p[..., 0] *= 0.5
    if n % 2 == 0 and k_lo <= n // 2 < k_hi_eff:
        p[..., n // 2 - k_lo] *= 0.5
    return p


def periodogram(segment, sample_rate=None, k_lo: int = 0, k_hi: int | None = None) -> PowerSpectrum:
    """One-sided periodogram of one segment.

    Parameters
    ----------
    segment : SampleSeries, FloatSeries or array_like
        Samples; bare arrays are taken to be millivolts.
    sample_rate : float, optional
        Needed only for bare arrays.
    k_lo, k_hi : int
        Keep only bins ``[k_lo, k_hi)``.

    Returns
    -------
    PowerSpectrum
        mV^2/Hz on the grid ``f0 = k_lo*df``, ``df = fs/N``.
    """
    x, fs = check_series(segment, sample_rate, min_length=2)
    n = x.shape[0]
    n_bins = n // 2 + 1
    k_hi = n_bins if k_hi is None else k_hi
    if not 0 <= k_lo < k_hi <= n_bins:
        raise ValueError(f"bin range [{k_lo}, {k_hi}) outside [0, {n_bins})")
    df = fs / n
    return PowerSpectrum(_power(x, fs, k_lo, k_hi), df=df, f0=k_lo * df)


def periodograms(X, sample_rate, k_lo=0, k_hi=None) -> np.ndarray:
    """Periodogram rows of a 2-D batch of segments (no wrapping)."""
    return _power(np.asarray(X, dtype=np.float64), sample_rate, k_lo, k_hi)


def _grid(p: PowerSpectrum) -> str:
    return f"(df={p.df}, f0={p.f0}, bins={len(p)})"


def average_psds(psds) -> PowerSpectrum:
    """Bin-wise mean of spectra, weighted by their ``n_averaged``.

    The running sum is accumulated in stream order, so a fixed input order
    gives bit-identical output.
    """
    total = None
    count = 0
    first = None
    for p in psds:
        if first is None:
            first = p
            total = p.values * p.n_averaged
        else:
            if not first.same_grid(p):
                raise DataError(
                    f"cannot average spectra on different grids: {_grid(first)} vs {_grid(p)}"
                )
            total = total + p.values * p.n_averaged
        count += p.n_averaged
    if first is None:
        raise DataError("no spectra to average")
    return PowerSpectrum(total / count, df=first.df, f0=first.f0, n_averaged=count)


# --------------------------------------------------------------------------
# whole-file and generator pipelines


def _accumulate(segments, sample_rate, k_lo, k_hi):
    acc = None
    n = 0
    for seg in segments:
        x = seg if isinstance(seg, np.ndarray) else seg.millivolts()
        p = _power(x, sample_rate, k_lo, k_hi)
        if acc is None:
            acc = p
        else:
            acc += p
        # drop the reference so the next spectrum does not coexist with this one
        del p, x
        n += 1
    return acc, n


def _reduce(parts, df, k_lo):
    acc = None
    count = 0
    for part, n in parts:
        if part is None:
            continue
        acc = part.copy() if acc is None else acc + part
        count += n
    if acc is None:
        raise DataError("no complete segments to average")
    return PowerSpectrum(acc / count, df=df, f0=k_lo * df, n_averaged=count)


def _bin_range(n, df, f_lo, f_hi):
    n_bins = n // 2 + 1
    k_lo = 0 if f_lo is None else max(0, int(np.floor(f_lo / df)))
    k_hi = n_bins if f_hi is None else min(n_bins, int(np.ceil(f_hi / df)) + 1)
    if k_lo >= k_hi:
        raise ValueError(f"empty frequency band [{f_lo}, {f_hi}]")
    return k_lo, k_hi


def _file_chunk(args):
    from .io import SegmentReader

    path, channel, seg_len, lo, hi, k_lo, k_hi = args
    reader = SegmentReader(path, channel, seg_len, first=lo, last=hi)
    return _accumulate(reader, reader.sample_rate, k_lo, k_hi)


def averaged_psd_from_file(
    path,
    channel: int = 0,
    segment_seconds: float = 10.0,
    workers: int = 1,
    f_lo=None,
    f_hi=None,
    progress=None,
) -> PowerSpectrum:
    """Stream a container channel and average its segment periodograms.

    Segments are split into contiguous per-worker runs whose partial sums
    are reduced in segment order.
    """
    from .io import SegmentReader

    probe = SegmentReader(path, channel, 1)
    plan = SegmentPlan(segment_seconds, probe.sample_rate)
    n_seg = plan.n_segments(probe.header.channel_lengths[channel])
    if n_seg == 0:
        raise DataError(
            f"{path}: channel shorter than one {segment_seconds} s segment"
        )
    k_lo, k_hi = _bin_range(plan.samples_per_segment, plan.df, f_lo, f_hi)
    chunks = split_range(n_seg, max(resolve_workers(workers), 1))
    parts = ordered_map(
        _file_chunk,
        [(path, channel, plan.samples_per_segment, lo, hi, k_lo, k_hi) for lo, hi in chunks],
        workers,
    )
    return _reduce(parts, plan.df, k_lo)


def _sim_chunk(args):
    from . import simgen

    noise, seconds, rate, seg_len, planted, lo, hi, k_lo, k_hi = args
    block = int(rate)
    blocks_per_seg = seg_len // block
    comps = planted.components(noise.seed) if planted is not None else None

    def segments():
        buf = np.empty(seg_len)
        for s in range(lo, hi):
            for j in range(blocks_per_seg):
                b = s * blocks_per_seg + j
                blk = simgen.science_block(noise, rate, b, b * block, block, planted, comps)
                np.multiply(blk.squid, MV_PER_COUNT, out=buf[j * block : (j + 1) * block])
            yield buf

    return _accumulate(segments(), rate, k_lo, k_hi)


def simulated_science_psd(
    noise,
    seconds: float,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    segment_seconds: float = 10.0,
    planted=None,
    workers: int = 1,
    f_lo=None,
    f_hi=None,
) -> PowerSpectrum:
    """Generate a science run and average its periodograms without storing it.

    Equivalent to writing the run with :func:`simgen.synth_science` and
    averaging the file, but holds only one segment per worker.
    """
    from .simgen import _check_science_inputs

    plan = SegmentPlan(segment_seconds, sample_rate)
    if segment_seconds != int(segment_seconds):
        raise ValueError("segment_seconds must be whole seconds for generated runs")
    _check_science_inputs(noise, sample_rate, planted)
    n_seg = int(round(seconds * sample_rate)) // plan.samples_per_segment
    if n_seg == 0:
        raise DataError("run shorter than one segment")
    k_lo, k_hi = _bin_range(plan.samples_per_segment, plan.df, f_lo, f_hi)
    chunks = split_range(n_seg, resolve_workers(workers))
    args = [
        (noise, seconds, sample_rate, plan.samples_per_segment, planted, lo, hi, k_lo, k_hi)
        for lo, hi in chunks
    ]
    return _reduce(ordered_map(_sim_chunk, args, workers), plan.df, k_lo)


def psd_to_csv(psd: PowerSpectrum, path) -> None:
    """Write ``frequency_hz,power`` rows."""
    data = np.column_stack([psd.frequencies, psd.values])
    np.savetxt(path, data, delimiter=",", header="frequency_hz,power", comments="", fmt="%.17g")
