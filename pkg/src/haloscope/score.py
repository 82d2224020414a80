"""Denoising score.

Each one-second segment yields the injected tone's frequency ``nu0``
(largest bin relative to its two neighbours in the injected PSD) and an
SNR for both channels: power in the three bins around ``nu0`` over power
in the 50 bins on either side of that region.  Injected SNRs are
normalised by their maximum, and

    Lambda = mean(snr_squid * snr_injected_norm)
    score  = log(Lambda) / log(base)

where ``base`` is Lambda of the raw (un-denoised) data, so raw data scores 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import fft as sp_fft
from sklearn.base import BaseEstimator

from ._validation import check_positive_int
from .dsp import _power
from .exceptions import DataError, NumericalError
from .model import FloatSeries, PowerSpectrum, SampleSeries
from .parallel import ordered_map, resolve_workers, split_range

COARSE_STRIDE = 10
MODES = ("fine", "coarse")


@dataclass(frozen=True)
class SnrRecord:
    segment_index: int
    nu0: float
    snr_squid: float
    snr_injected: float
    snr_injected_norm: float = float("nan")


@dataclass
class ScoreReport:
    records: list
    lambda_: float
    base: float
    score: float
    mode: str
    n_sig: int = 1
    n_bkg: int = 50

    @property
    def n_segments(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "base": self.base,
            "lambda": self.lambda_,
            "score": self.score,
            "n_segments": self.n_segments,
            "n_sig": self.n_sig,
            "n_bkg": self.n_bkg,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self, path=None, indent=2):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d) -> "ScoreReport":
        return cls(
            records=[SnrRecord(**r) for r in d["records"]],
            lambda_=d["lambda"],
            base=d["base"],
            score=d["score"],
            mode=d["mode"],
            n_sig=d.get("n_sig", 1),
            n_bkg=d.get("n_bkg", 50),
        )


def _check_mode(mode) -> str:
    mode = str(mode).lower()
    if mode not in MODES:
        raise ValueError(f"mode must be 'fine' or 'coarse', not {mode!r}")
    return mode


# --------------------------------------------------------------------------
# per-spectrum pieces


def _peak_bin(p: np.ndarray) -> int:
    if p.shape[-1] < 3:
        raise DataError("PSD needs at least 3 bins to locate a peak")
    excess = p[1:-1] - (p[:-2] + p[2:])
    # argmax returns the first maximum: ties go to the lowest frequency
    return int(np.argmax(excess)) + 1


def find_signal_bin(injected_psd: PowerSpectrum) -> float:
    """Frequency of the bin standing highest above its two neighbours."""
    return injected_psd.f0 + _peak_bin(injected_psd.values) * injected_psd.df


def _window_bounds(k0, n_bins, n_sig, n_bkg):
    lo, hi = k0 - n_sig - n_bkg, k0 + n_sig + n_bkg
    if lo < 0 or hi > n_bins - 1:
        raise DataError(
            f"signal bin {k0} too close to the spectrum edge: the noise region "
            f"[{lo}, {hi}] leaves [0, {n_bins - 1}]"
        )
    return lo, hi


def _snr_at(p: np.ndarray, k0: int, n_sig: int, n_bkg: int) -> float:
    lo, hi = _window_bounds(k0, p.shape[0], n_sig, n_bkg)
    signal = p[k0 - n_sig : k0 + n_sig + 1].sum()
    noise = p[lo : k0 - n_sig].sum() + p[k0 + n_sig + 1 : hi + 1].sum()
    if not noise > 0:
        raise NumericalError(f"degenerate noise region around bin {k0}")
    return float(signal / noise)


def snr(psd: PowerSpectrum, nu0: float, n_sig: int = 1, n_bkg: int = 50) -> float:
    """Signal-region power over adjacent noise-region power.

    Signal region: bins ``k0 - n_sig .. k0 + n_sig``.  Noise region:
    ``n_bkg`` bins on each side directly outside the signal region.
    """
    k0 = psd.bin_of(nu0)
    return _snr_at(psd.values, k0, n_sig, n_bkg)


# --------------------------------------------------------------------------
# segment streams


def _values(seg):
    if isinstance(seg, (SampleSeries, FloatSeries)):
        return seg.millivolts(), seg.sample_rate
    return np.asarray(seg, dtype=np.float64), None


def _segment_record(index, squid, injected, sample_rate, n_sig, n_bkg, denoiser=None):
    xs, rs = _values(squid)
    xi, ri = _values(injected)
    rate = rs or ri or sample_rate
    if rate is None:
        raise ValueError("sample_rate is required for bare arrays")
    if xs.shape != xi.shape:
        raise DataError(
            f"segment {index}: channel length mismatch ({xs.shape[0]} vs {xi.shape[0]})"
        )
    if denoiser is not None:
        xs = np.asarray(denoiser.transform(xs), dtype=np.float64)
    p_inj = _power(xi, rate)
    k0 = _peak_bin(p_inj)
    df = rate / xi.shape[0]
    try:
        s_inj = _snr_at(p_inj, k0, n_sig, n_bkg)
        s_sq = _snr_at(_power(xs, rate), k0, n_sig, n_bkg)
    except (DataError, NumericalError) as exc:
        raise type(exc)(f"segment {index}: {exc}") from None
    return SnrRecord(index, k0 * df, s_sq, s_inj)


def segment_pairs(squid, injected, segment_seconds: float = 1.0, sample_rate=None):
    """Cut two aligned in-memory series into ``(squid, injected)`` segments."""
    if len(squid) != len(injected):
        raise DataError(f"channel length mismatch ({len(squid)} vs {len(injected)})")
    rate = getattr(squid, "sample_rate", None) or getattr(injected, "sample_rate", None) or sample_rate
    if rate is None:
        raise ValueError("sample_rate is required for bare arrays")
    n = int(round(segment_seconds * rate))
    for s in range(len(squid) // n):
        yield _slice(squid, s * n, n, rate), _slice(injected, s * n, n, rate)


def _slice(x, start, n, rate):
    if isinstance(x, SampleSeries):
        return SampleSeries(x.samples[start : start + n], rate, x.channel_role, start)
    if isinstance(x, FloatSeries):
        return FloatSeries(x.samples[start : start + n], rate, start)
    return FloatSeries(np.asarray(x[start : start + n], dtype=np.float64), rate, start)


def compute_records(
    pairs: Iterable,
    mode: str = "fine",
    n_sig: int = 1,
    n_bkg: int = 50,
    sample_rate=None,
    denoiser=None,
) -> list:
    """Un-normalised SNR records for a stream of ``(squid, injected)`` segments."""
    stride = COARSE_STRIDE if _check_mode(mode) == "coarse" else 1
    out = []
    for i, (sq, inj) in enumerate(pairs):
        if i % stride:
            continue
        out.append(_segment_record(i, sq, inj, sample_rate, n_sig, n_bkg, denoiser))
    return out


def _file_records_chunk(args):
    from .io import SegmentReader

    (sq_path, sq_ch, inj_path, inj_ch, seg_len, indices, n_sig, n_bkg, denoiser) = args
    sq = SegmentReader(sq_path, sq_ch, seg_len)
    inj = SegmentReader(inj_path, inj_ch, seg_len)
    return [
        _segment_record(i, sq.segment(i), inj.segment(i), None, n_sig, n_bkg, denoiser)
        for i in indices
    ]


def compute_records_from_files(
    squid_path,
    injected_path,
    squid_channel: int = 0,
    injected_channel: int = 1,
    mode: str = "fine",
    segment_seconds: float = 1.0,
    n_sig: int = 1,
    n_bkg: int = 50,
    workers: int = 1,
    denoiser=None,
) -> list:
    """SNR records for segments read straight from containers."""
    from .io import SegmentReader

    stride = COARSE_STRIDE if _check_mode(mode) == "coarse" else 1
    sq = SegmentReader(squid_path, squid_channel, 1)
    inj = SegmentReader(injected_path, injected_channel, 1)
    if sq.sample_rate != inj.sample_rate:
        raise DataError(
            f"sample rate mismatch: {sq.sample_rate} Hz vs {inj.sample_rate} Hz"
        )
    n_sq = sq.header.channel_lengths[squid_channel]
    n_inj = inj.header.channel_lengths[injected_channel]
    if n_sq != n_inj:
        raise DataError(f"channel length mismatch: {n_sq} vs {n_inj} samples")
    seg_len = int(round(segment_seconds * sq.sample_rate))
    indices = list(range(0, n_sq // seg_len, stride))
    if not indices:
        raise DataError("no complete segments to score")
    chunks = split_range(len(indices), resolve_workers(workers))
    parts = ordered_map(
        _file_records_chunk,
        [
            (squid_path, squid_channel, injected_path, injected_channel, seg_len,
             indices[lo:hi], n_sig, n_bkg, denoiser)
            for lo, hi in chunks
        ],
        workers,
    )
    return [r for part in parts for r in part]


# --------------------------------------------------------------------------
# aggregation


def lambda_from_records(records: Sequence) -> tuple:
    """Return ``(Lambda, normalised records)``."""
    if not records:
        raise DataError("no segments to score")
    s_inj = np.array([r.snr_injected for r in records])
    top = s_inj.max()
    if not top > 0:
        raise NumericalError("all injected SNRs are zero")
    norm = s_inj / top
    s_sq = np.array([r.snr_squid for r in records])
    lam = float(np.mean(s_sq * norm))
    recs = [
        SnrRecord(r.segment_index, r.nu0, r.snr_squid, r.snr_injected, float(n))
        for r, n in zip(records, norm)
    ]
    return lam, recs


def score_value(lam: float, base: float) -> float:
    if not base > 1:
        raise ValueError(f"base must exceed 1, got {base}")
    if not lam > 0:
        raise NumericalError(f"Lambda must be positive to take its log, got {lam}")
    return math.log(lam) / math.log(base)


def score_records(records, base, mode="fine", n_sig=1, n_bkg=50) -> ScoreReport:
    lam, recs = lambda_from_records(records)
    return ScoreReport(recs, lam, float(base), score_value(lam, base), _check_mode(mode), n_sig, n_bkg)


def score_dataset(pairs, base, mode="fine", n_sig=1, n_bkg=50, sample_rate=None, denoiser=None) -> ScoreReport:
    """Score a stream of aligned ``(squid, injected)`` one-second segments.

    Coarse mode keeps stream positions 0, 10, 20, ... and normalises the
    injected SNRs over that subset only.
    """
    if not base > 1:
        raise ValueError(f"base must exceed 1, got {base}")
    records = compute_records(pairs, mode, n_sig, n_bkg, sample_rate, denoiser)
    return score_records(records, base, mode, n_sig, n_bkg)


def calibrate_base(raw_pairs, n_sig=1, n_bkg=50, sample_rate=None) -> float:
    """Fine-mode Lambda of un-denoised data, used as the logarithm base."""
    records = raw_pairs if _is_records(raw_pairs) else compute_records(
        raw_pairs, "fine", n_sig, n_bkg, sample_rate
    )
    lam, _ = lambda_from_records(records)
    return _checked_base(lam)


def _checked_base(lam):
    if not lam > 1:
        raise NumericalError(
            f"raw Lambda is {lam:.6g} <= 1; the raw data cannot serve as a score base"
        )
    return lam


def _is_records(obj):
    return isinstance(obj, (list, tuple)) and bool(obj) and isinstance(obj[0], SnrRecord)


class DenoisingScorer(BaseEstimator):
    """Estimator wrapper: ``fit`` calibrates the base, ``score`` scores.

    Parameters
    ----------
    base : float or None
        Logarithm base; ``None`` calibrates it from the data passed to fit.
    mode : {'fine', 'coarse'}
    n_sig, n_bkg : int
        Half-width of the signal region and per-side noise-region width, bins.
    sample_rate : float, optional
        Needed when segments are bare arrays.
    """

    def __init__(self, base=None, mode="fine", n_sig=1, n_bkg=50, sample_rate=None):
        self.base = base
        self.mode = mode
        self.n_sig = n_sig
        self.n_bkg = n_bkg
        self.sample_rate = sample_rate

    def fit(self, pairs, y=None):
        """Calibrate ``base_`` on raw segments (fine mode)."""
        check_positive_int(self.n_sig, "n_sig")
        check_positive_int(self.n_bkg, "n_bkg")
        _check_mode(self.mode)
        if self.base is not None:
            self.base_ = float(self.base)
            if not self.base_ > 1:
                raise ValueError("base must exceed 1")
            return self
        records = compute_records(pairs, "fine", self.n_sig, self.n_bkg, self.sample_rate)
        lam, _ = lambda_from_records(records)
        self.base_ = _checked_base(lam)
        self.calibration_records_ = records
        return self

    def report(self, pairs, denoiser=None) -> ScoreReport:
        base = getattr(self, "base_", self.base)
        if base is None:
            raise ValueError("scorer is not calibrated; call fit or set base")
        return score_dataset(
            pairs, base, self.mode, self.n_sig, self.n_bkg, self.sample_rate, denoiser
        )

    def score(self, pairs, y=None) -> float:
        return self.report(pairs).score


# --------------------------------------------------------------------------
# noise robustness study


@dataclass
class NoiseGridResult:
    """Scores and Lambdas for every (amplitude, sigma) perturbation.

    ``scores[i, j]`` uses ``amplitudes[i]`` and ``sigmas[j]``.
    """

    amplitudes: np.ndarray
    sigmas: np.ndarray
    scores: np.ndarray
    lambdas: np.ndarray
    base: float
    target: str = "squid"

    def log_lambda_fit(self, column: int, interior_only: bool = True):
        """Least-squares line of ln(Lambda) against amplitude; returns ``(slope, r2)``.

        ``interior_only`` drops the smallest and largest amplitude.
        """
        a = self.amplitudes
        y = np.log(self.lambdas[:, column])
        if interior_only and len(a) > 3:
            a, y = a[1:-1], y[1:-1]
        slope, icpt = np.polyfit(a, y, 1)
        resid = y - (slope * a + icpt)
        ss_tot = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
        return float(slope), float(r2)

    def to_dict(self):
        return {
            "amplitudes": self.amplitudes.tolist(),
            "sigmas": self.sigmas.tolist(),
            "scores": self.scores.tolist(),
            "lambdas": self.lambdas.tolist(),
            "base": self.base,
            "target": self.target,
        }


def _grid_segment(args):
    """SNRs of one segment for every perturbation scale.

    Uses FFT linearity: the spectrum of ``x + c z`` is ``X + c Z``, so each
    segment needs only two transforms regardless of the grid size.
    """
    (index, sq, inj, rate, scales, seed, target, n_sig, n_bkg) = args
    from .simgen import gaussian_perturbation

    xs, _ = _values(sq)
    xi, _ = _values(inj)
    n = xs.shape[0]
    norm = 2.0 / (rate * n)
    z = sp_fft.rfft(gaussian_perturbation(seed, index, n))
    X_sq = sp_fft.rfft(xs)
    X_inj = sp_fft.rfft(xi)

    def power(X):
        p = (X.real**2 + X.imag**2) * norm
        p[0] *= 0.5
        if n % 2 == 0:
            p[-1] *= 0.5
        return p

    s_sq = np.empty(len(scales))
    s_inj = np.empty(len(scales))
    base_p_inj = power(X_inj)
    base_p_sq = None
    base_k0 = _peak_bin(base_p_inj)
    for j, c in enumerate(scales):
        if target == "injected":
            p_inj = power(X_inj + c * z) if c else base_p_inj
            k0 = _peak_bin(p_inj)
            s_inj[j] = _snr_at(p_inj, k0, n_sig, n_bkg)
            if base_p_sq is None:
                base_p_sq = power(X_sq)
            s_sq[j] = _snr_at(base_p_sq, k0, n_sig, n_bkg)
        else:
            k0 = base_k0
            s_inj[j] = _snr_at(base_p_inj, k0, n_sig, n_bkg)
            lo, hi = _window_bounds(k0, len(base_p_inj), n_sig, n_bkg)
            seg = X_sq[lo : hi + 1] + c * z[lo : hi + 1]
            p = (seg.real**2 + seg.imag**2) * norm
            s_sq[j] = _snr_at(p, k0 - lo, n_sig, n_bkg)
    return s_sq, s_inj


def noise_robustness_grid(
    squid,
    injected,
    amplitudes: Sequence[float],
    sigmas: Sequence[float],
    base: float,
    target: str = "squid",
    seed: int = 0,
    segment_seconds: float = 1.0,
    n_sig: int = 1,
    n_bkg: int = 50,
    sample_rate=None,
    workers: int = 1,
) -> NoiseGridResult:
    """Fine scores after adding seeded Gaussian noise to one channel.

    The perturbation for cell ``(a, s)`` is ``a * s * Z`` with ``Z`` a
    standard-normal series shared by every cell (common random numbers),
    so differences between cells are not masked by sampling noise.
    """
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if amplitudes.size == 0 or sigmas.size == 0:
        raise ValueError("amplitude and sigma grids must be non-empty")
    if np.any(amplitudes < 0) or np.any(sigmas < 0):
        raise ValueError("amplitudes and sigmas must be non-negative")
    if target not in ("squid", "injected"):
        raise ValueError("target must be 'squid' or 'injected'")
    if not base > 1:
        raise ValueError("base must exceed 1")
    scales = (amplitudes[:, None] * sigmas[None, :]).ravel()
    segs = list(segment_pairs(squid, injected, segment_seconds, sample_rate))
    if not segs:
        raise DataError("series shorter than one segment")
    rate = segs[0][0].sample_rate
    args = [
        (i, sq, inj, rate, scales, seed, target, n_sig, n_bkg)
        for i, (sq, inj) in enumerate(segs)
    ]
    results = ordered_map(_grid_segment, args, workers)
    s_sq = np.array([r[0] for r in results])
    s_inj = np.array([r[1] for r in results])
    norm = s_inj / s_inj.max(axis=0)
    lam = np.mean(s_sq * norm, axis=0)
    shape = (amplitudes.size, sigmas.size)
    lam = lam.reshape(shape)
    scores = np.log(lam) / math.log(base)
    return NoiseGridResult(amplitudes, sigmas, scores, lam, float(base), target)


def noise_grid_direct(squid, injected, amplitude, sigma, base, target="squid", seed=0,
                      segment_seconds=1.0, n_sig=1, n_bkg=50, sample_rate=None) -> ScoreReport:
    """Reference path for one grid cell: perturb in the time domain and score."""
    from .simgen import gaussian_perturbation

    out = []
    for i, (sq, inj) in enumerate(segment_pairs(squid, injected, segment_seconds, sample_rate)):
        z = gaussian_perturbation(seed, i, len(sq)) * (amplitude * sigma)
        if target == "squid":
            sq = FloatSeries(sq.millivolts() + z, sq.sample_rate)
        else:
            inj = FloatSeries(inj.millivolts() + z, inj.sample_rate)
        out.append(_segment_record(i, sq, inj, None, n_sig, n_bkg))
    return score_records(out, base, "fine", n_sig, n_bkg)
