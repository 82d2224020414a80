"""Denoisers applied to the SQUID channel before scoring.

Two in-process smoothers (moving average and Savitzky-Golay) plus a
subprocess protocol for anything else: the command is called as
``command <input.tsd> <output.tsd>`` and must write a single-channel
container of the same length and sample rate.

All denoisers are scikit-learn transformers.  ``transform`` accepts a
series (returns a :class:`FloatSeries`), a 1-D array (returns 1-D) or a
2-D batch whose rows are independent segments.
"""
from __future__ import annotations

import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg, ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive, check_positive_int
from .exceptions import (
    CommandNotFoundError,
    DataError,
    ExternalExitError,
    ExternalTimeoutError,
    LengthMismatchError,
)
from .model import DEFAULT_SAMPLE_RATE, FloatSeries, SampleSeries

TMPDIR_ENV = "HALOSCOPE_TMPDIR"


def _split_input(x):
    """Return ``(2-D float array, rebuild)`` where rebuild restores the input kind."""
    if isinstance(x, (SampleSeries, FloatSeries)):
        rate, start = x.sample_rate, x.start_index
        return x.millivolts()[None, :], lambda y: FloatSeries(y[0], rate, start)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], lambda y: y[0]
    if arr.ndim == 2:
        return arr, lambda y: y
    raise ValueError(f"expected a series, 1-D or 2-D array, got shape {arr.shape}")


def _moving_average_rows(X: np.ndarray, window: int) -> np.ndarray:
    n = X.shape[1]
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    t = np.arange(n)
    lo = np.maximum(t - window // 2, 0)
    hi = np.minimum(t + (window + 1) // 2, n)
    # centred cumulative sums keep rounding error small on long rows
    mean = X.mean(axis=1, keepdims=True)
    c = np.zeros((X.shape[0], n + 1))
    np.cumsum(X - mean, axis=1, out=c[:, 1:])
    return (c[:, hi] - c[:, lo]) / (hi - lo) + mean


def moving_average(x, window: int = 100):
    """Centred moving average with a window that shrinks at the edges.

    ``y[t]`` is the mean of ``x[t - window//2 : t + ceil(window/2)]``
    clipped to the valid range, so the output has the input's length.
    """
    window = check_positive_int(window, "window", minimum=2)
    X, rebuild = _split_input(x)
    return rebuild(_moving_average_rows(X, window))


def _check_savgol(window, order):
    window = check_positive_int(window, "window", minimum=2)
    order = check_positive_int(order, "order", minimum=0)
    if window % 2 == 0:
        raise ValueError(
            f"Savitzky-Golay window must be odd, got {window}; "
            f"use {window + 1} or {window - 1}"
        )
    if order >= window:
        raise ValueError(f"order {order} must be less than window {window}")
    return window, order


@lru_cache(maxsize=32)
def savgol_coefficients(window: int, order: int) -> np.ndarray:
    """Smoothing weights of the centred least-squares polynomial fit.

    Fits a degree-``order`` polynomial to ``window`` points by least
    squares and returns the weights giving its value at the centre.
    """
    window, order = _check_savgol(window, order)
    half = window // 2
    u = np.arange(-half, half + 1) / max(half, 1)
    vander = np.vander(u, order + 1, increasing=True)
    # row 0 of the pseudo-inverse evaluates the fitted polynomial at u = 0
    coeffs = linalg.lstsq(vander, np.eye(window))[0][0]
    coeffs.flags.writeable = False
    return coeffs


def savitzky_golay(x, window: int = 101, order: int = 11):
    """Savitzky-Golay smoothing with mirror-padded edges."""
    coeffs = savgol_coefficients(window, order)
    X, rebuild = _split_input(x)
    if window > X.shape[1]:
        raise ValueError(f"window {window} exceeds series length {X.shape[1]}")
    return rebuild(ndimage.correlate1d(X, coeffs, axis=1, mode="mirror"))


def _resolve_command(command):
    argv = shlex.split(command) if isinstance(command, str) else [str(c) for c in command]
    if not argv:
        raise CommandNotFoundError("empty external denoiser command")
    exe = argv[0]
    if os.sep in exe:
        if not (os.path.isfile(exe) and os.access(exe, os.X_OK)):
            raise CommandNotFoundError(f"external denoiser not found or not executable: {exe}")
    elif shutil.which(exe) is None:
        raise CommandNotFoundError(f"external denoiser command not found: {exe}")
    return argv


def run_external(x, command, timeout: float = 600.0, sample_rate=None):
    """Denoise ``x`` with an external program.

    Parameters
    ----------
    x : SampleSeries, FloatSeries or 1-D array (mV)
    command : str or sequence of str
        Program and leading arguments; input and output paths are appended.
    timeout : float
        Seconds before the process is killed.

    Returns
    -------
    FloatSeries
        The program's output in millivolts.

    Raises
    ------
    CommandNotFoundError, ExternalExitError, ExternalTimeoutError,
    LengthMismatchError
    """
    from .io import read_container, write_container

    argv = _resolve_command(command)
    if isinstance(x, (SampleSeries, FloatSeries)):
        series = x
    else:
        rate = DEFAULT_SAMPLE_RATE if sample_rate is None else sample_rate
        series = FloatSeries(np.asarray(x, dtype=np.float64), rate)
    n = len(series)
    with tempfile.TemporaryDirectory(prefix="denoise-", dir=os.environ.get(TMPDIR_ENV)) as tmp:
        src = Path(tmp) / "input.tsd"
        dst = Path(tmp) / "output.tsd"
        write_container(src, [series])
        try:
            proc = subprocess.run(
                argv + [str(src), str(dst)],
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except FileNotFoundError as exc:
            raise CommandNotFoundError(f"external denoiser command not found: {argv[0]}") from exc
        except PermissionError as exc:
            raise CommandNotFoundError(f"external denoiser not executable: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise ExternalTimeoutError(
                f"external denoiser {argv[0]!r} timed out after {timeout} s"
            ) from exc
        if proc.returncode != 0:
            raise ExternalExitError(argv[0], proc.returncode, proc.stderr)
        if not dst.exists():
            raise DataError(f"external denoiser {argv[0]!r} wrote no output file")
        out = read_container(dst)
    result = out[0]
    if len(result) != n:
        raise LengthMismatchError(n, len(result))
    if result.sample_rate != series.sample_rate:
        raise DataError(
            f"external denoiser changed the sample rate from {series.sample_rate} "
            f"to {result.sample_rate}"
        )
    return FloatSeries(result.millivolts(), series.sample_rate, series.start_index)


# --------------------------------------------------------------------------
# estimators


class _Denoiser(TransformerMixin, BaseEstimator):
    def fit(self, X=None, y=None):
        self._check_params()
        return self

    def _check_params(self):
        pass

    def transform(self, X):
        self._check_params()
        rows, rebuild = _split_input(X)
        return rebuild(self._filter(rows, X))

    def _filter(self, rows, original):  # pragma: no cover - abstract
        raise NotImplementedError

    def __sklearn_is_fitted__(self):
        return True


class IdentityDenoiser(_Denoiser):
    """Returns the input unchanged (as millivolts)."""

    def _filter(self, rows, original):
        return rows.copy()


class MovingAverageDenoiser(_Denoiser):
    """Centred moving average; see :func:`moving_average`."""

    def __init__(self, window=100):
        self.window = window

    def _check_params(self):
        check_positive_int(self.window, "window", minimum=2)

    def _filter(self, rows, original):
        return _moving_average_rows(rows, int(self.window))


class SavitzkyGolayDenoiser(_Denoiser):
    """Savitzky-Golay smoother; see :func:`savitzky_golay`."""

    def __init__(self, window=101, order=11):
        self.window = window
        self.order = order

    def _check_params(self):
        _check_savgol(self.window, self.order)

    def _filter(self, rows, original):
        return savitzky_golay(rows, int(self.window), int(self.order))


class ExternalDenoiser(_Denoiser):
    """Delegates each row to an external program; see :func:`run_external`."""

    def __init__(self, command=None, timeout=600.0, sample_rate=None):
        self.command = command
        self.timeout = timeout
        self.sample_rate = sample_rate

    def _check_params(self):
        if not self.command:
            raise ValueError("ExternalDenoiser needs a command")
        check_positive(self.timeout, "timeout")

    def _filter(self, rows, original):
        if isinstance(original, (SampleSeries, FloatSeries)):
            return run_external(original, self.command, self.timeout).samples[None, :]
        return np.stack(
            [
                run_external(r, self.command, self.timeout, self.sample_rate).samples
                for r in rows
            ]
        )


_KINDS = {
    "none": "none",
    "identity": "none",
    "moving_average": "moving_average",
    "movingaverage": "moving_average",
    "ma": "moving_average",
    "savitzky_golay": "savitzky_golay",
    "savitzkygolay": "savitzky_golay",
    "sg": "savitzky_golay",
    "external": "external",
}


@dataclass(frozen=True)
class DenoiserSpec:
    """Serializable description of a denoiser.

    ``kind`` is one of ``none``, ``moving_average``, ``savitzky_golay`` or
    ``external``; the remaining fields apply to the matching kind.
    """

    kind: str = "none"
    window: int | None = None
    order: int = 11
    command: object = None
    timeout: float = 600.0

    def __post_init__(self):
        key = str(self.kind).lower().replace("-", "_").replace(" ", "_")
        kind = _KINDS.get(key, _KINDS.get(key.replace("_", "")))
        if kind is None:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "moving_average":
            object.__setattr__(self, "window", 100 if self.window is None else self.window)
            check_positive_int(self.window, "window", minimum=2)
        elif kind == "savitzky_golay":
            object.__setattr__(self, "window", 101 if self.window is None else self.window)
            _check_savgol(self.window, self.order)
        elif kind == "external" and not self.command:
            raise ValueError("external denoiser needs a command")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("moving_average", "savitzky_golay"):
            d["window"] = self.window
        if self.kind == "savitzky_golay":
            d["order"] = self.order
        if self.kind == "external":
            d["command"] = self.command
            d["timeout"] = self.timeout
        return d

    @classmethod
    def from_dict(cls, d) -> "DenoiserSpec":
        if isinstance(d, str):
            return cls(d)
        return cls(**d)


def make_denoiser(spec) -> _Denoiser:
    """Build the transformer described by a :class:`DenoiserSpec` or dict."""
    if not isinstance(spec, DenoiserSpec):
        spec = DenoiserSpec.from_dict(spec)
    if spec.kind == "none":
        return IdentityDenoiser()
    if spec.kind == "moving_average":
        return MovingAverageDenoiser(spec.window)
    if spec.kind == "savitzky_golay":
        return SavitzkyGolayDenoiser(spec.window, spec.order)
    return ExternalDenoiser(spec.command, spec.timeout)
