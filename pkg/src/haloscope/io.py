"""Reader and writer for the ``.tsd`` time-series container.

Layout (all integers little-endian)::

    magic        4 bytes  b"TIDM"
    version      u16      1
    format       u8       0 = int8 counts, 1 = float32 millivolts
    n_channels   u8       1 or 2
    sample_rate  u64      Hz
    lengths      n_channels x u64
    payload      channel 0 samples, then channel 1 samples, no padding

Two-channel files hold the SQUID channel first and the injected channel
second.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ContainerError
from .model import ChannelRole, FloatSeries, SampleSeries

MAGIC = b"TIDM"
VERSION = 1
_FIXED = struct.Struct("<4sHBBQ")


class SampleFormat(enum.IntEnum):
    INT8 = 0
    REAL32 = 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.int8) if self is SampleFormat.INT8 else np.dtype("<f4")

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize


@dataclass(frozen=True)
class ContainerHeader:
    sample_format: SampleFormat
    sample_rate: int
    channel_lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "sample_format", SampleFormat(self.sample_format))
        object.__setattr__(self, "channel_lengths", tuple(int(n) for n in self.channel_lengths))
        if self.n_channels not in (1, 2):
            raise ContainerError(f"n_channels must be 1 or 2, got {self.n_channels}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ContainerError(f"sample rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        if any(n < 0 for n in self.channel_lengths):
            raise ContainerError("channel lengths must be non-negative")

    @property
    def n_channels(self) -> int:
        return len(self.channel_lengths)

    @property
    def size(self) -> int:
        return _FIXED.size + 8 * self.n_channels

    def channel_offset(self, channel: int) -> int:
        self._check_channel(channel)
        return self.size + sum(self.channel_lengths[:channel]) * self.sample_format.itemsize

    @property
    def file_size(self) -> int:
        return self.size + sum(self.channel_lengths) * self.sample_format.itemsize

    def _check_channel(self, channel):
        if not 0 <= channel < self.n_channels:
            raise ContainerError(
                f"channel {channel} does not exist (file has {self.n_channels})"
            )

    def pack(self) -> bytes:
        return _FIXED.pack(
            MAGIC, VERSION, int(self.sample_format), self.n_channels, self.sample_rate
        ) + struct.pack(f"<{self.n_channels}Q", *self.channel_lengths)

    @classmethod
    def unpack(cls, data: bytes) -> "ContainerHeader":
        if len(data) < _FIXED.size:
            raise ContainerError(
                f"corrupt header: {len(data)} bytes, need at least {_FIXED.size}"
            )
        magic, version, fmt, n_ch, rate = _FIXED.unpack_from(data)
        if magic != MAGIC:
            raise ContainerError(f"corrupt header: bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"corrupt header: unsupported version {version}")
        if fmt not in (0, 1):
            raise ContainerError(f"corrupt header: unknown sample format {fmt}")
        if n_ch not in (1, 2):
            raise ContainerError(f"corrupt header: n_channels = {n_ch}")
        need = _FIXED.size + 8 * n_ch
        if len(data) < need:
            raise ContainerError(f"corrupt header: {len(data)} bytes, need {need}")
        lengths = struct.unpack_from(f"<{n_ch}Q", data, _FIXED.size)
        if rate == 0:
            raise ContainerError("corrupt header: sample rate is zero")
        return cls(SampleFormat(fmt), rate, lengths)


def read_header(path) -> ContainerHeader:
    """Parse the header and check the payload length against it."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_FIXED.size + 16)
    try:
        header = ContainerHeader.unpack(head)
    except ContainerError as exc:
        raise ContainerError(f"{path}: {exc}") from None
    actual = os.path.getsize(path)
    if actual < header.file_size:
        raise ContainerError(
            f"{path}: truncated payload: expected {header.file_size} bytes, "
            f"found {actual} ({header.file_size - actual} bytes missing)"
        )
    if actual > header.file_size:
        raise ContainerError(
            f"{path}: trailing data: expected {header.file_size} bytes, found {actual}"
        )
    return header


def _channel_data(ch):
    """Return (array, format, sample_rate) for a series or bare array."""
    if isinstance(ch, SampleSeries):
        return ch.samples, SampleFormat.INT8, ch.sample_rate
    if isinstance(ch, FloatSeries):
        return ch.samples, SampleFormat.REAL32, ch.sample_rate
    arr = np.asarray(ch)
    fmt = SampleFormat.INT8 if arr.dtype == np.int8 else SampleFormat.REAL32
    return arr, fmt, None


def _wrap_os_error(exc: OSError, path) -> OSError:
    if exc.filename:
        return exc
    return type(exc)(exc.errno, f"{exc.strerror or exc}", str(path))


class ContainerWriter:
    """Streaming writer; each channel is filled by successive ``write`` calls.

    The header (including final lengths) is written up front, so lengths
    must be known in advance.  ``close`` verifies every channel is full.
    """

    def __init__(self, path, sample_rate, channel_lengths, sample_format=SampleFormat.INT8):
        self.path = Path(path)
        self.header = ContainerHeader(sample_format, sample_rate, tuple(channel_lengths))
        self._written = [0] * self.header.n_channels
        try:
            self._fh = open(self.path, "wb")
            self._fh.write(self.header.pack())
        except OSError as exc:
            raise _wrap_os_error(exc, self.path) from None

    def write(self, channel: int, samples) -> None:
        self.header._check_channel(channel)
        fmt = self.header.sample_format
        arr = np.asarray(samples)
        if fmt is SampleFormat.INT8:
            if arr.dtype != np.int8:
                raise ContainerError(f"int8 container expects int8 samples, got {arr.dtype}")
        else:
            arr = arr.astype("<f4", copy=False)
        arr = np.ascontiguousarray(arr).reshape(-1)
        pos = self._written[channel]
        if pos + arr.size > self.header.channel_lengths[channel]:
            raise ContainerError(
                f"channel {channel} overflow: declared {self.header.channel_lengths[channel]} samples"
            )
        try:
            self._fh.seek(self.header.channel_offset(channel) + pos * fmt.itemsize)
            self._fh.write(arr.tobytes())
        except OSError as exc:
            raise _wrap_os_error(exc, self.path) from None
        self._written[channel] = pos + arr.size

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            self._fh.close()
        except OSError as exc:
            raise _wrap_os_error(exc, self.path) from None
        short = [
            (i, w, n)
            for i, (w, n) in enumerate(zip(self._written, self.header.channel_lengths))
            if w != n
        ]
        if short:
            i, w, n = short[0]
            raise ContainerError(f"{self.path}: channel {i} has {w} of {n} samples")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_container(path, channels: Sequence, sample_rate=None) -> ContainerHeader:
    """Write one or two channels to ``path``.

    Integer (:class:`SampleSeries` or int8) channels produce an int8 file;
    any real-valued channel switches the whole file to float32, with int8
    channels converted to millivolts.
    """
    channels = list(channels)
    if not 1 <= len(channels) <= 2:
        raise ContainerError(f"a container holds 1 or 2 channels, got {len(channels)}")
    data = [_channel_data(c) for c in channels]
    rates = {r for _, _, r in data if r is not None}
    if sample_rate is not None:
        rates.add(sample_rate)
    if len(rates) > 1:
        raise ContainerError(f"channels have different sample rates: {sorted(rates)}")
    if not rates:
        raise ContainerError("sample_rate is required for bare arrays")
    rate = rates.pop()
    fmt = (
        SampleFormat.INT8
        if all(f is SampleFormat.INT8 for _, f, _ in data)
        else SampleFormat.REAL32
    )
    arrays = []
    for arr, f, _ in data:
        if fmt is SampleFormat.REAL32 and f is SampleFormat.INT8:
            arr = arr.astype(np.float64) * (40.0 / 128.0)
        arrays.append(arr)
    with ContainerWriter(path, rate, [a.size for a in arrays], fmt) as w:
        for i, arr in enumerate(arrays):
            w.write(i, arr)
    return w.header


def _as_series(raw, fmt, rate, start, role):
    if fmt is SampleFormat.INT8:
        return SampleSeries(raw, rate, role, start)
    return FloatSeries(raw.astype(np.float64), rate, start)


def _role(header, channel):
    if header.n_channels == 2 and channel == 1:
        return ChannelRole.INJECTED
    return ChannelRole.SQUID


def read_range(path, channel: int, start: int, count: int, header=None):
    """Read ``count`` samples of ``channel`` beginning at ``start``."""
    header = header or read_header(path)
    header._check_channel(channel)
    n = header.channel_lengths[channel]
    if start < 0 or count < 0 or start + count > n:
        raise ContainerError(
            f"range [{start}, {start + count}) outside channel {channel} of length {n}"
        )
    fmt = header.sample_format
    raw = np.fromfile(
        path,
        dtype=fmt.dtype,
        count=count,
        offset=header.channel_offset(channel) + start * fmt.itemsize,
    )
    if raw.size != count:
        raise ContainerError(
            f"{path}: truncated payload: expected {count * fmt.itemsize} bytes, "
            f"read {raw.size * fmt.itemsize}"
        )
    return _as_series(raw, fmt, header.sample_rate, start, _role(header, channel))


def read_container(path) -> list:
    """Read every channel of a container into memory."""
    header = read_header(path)
    return [
        read_range(path, ch, 0, header.channel_lengths[ch], header)
        for ch in range(header.n_channels)
    ]


class SegmentReader:
    """Iterable over consecutive fixed-length segments of one channel.

    Only one segment is held in memory at a time.  A trailing partial
    segment is dropped; its size is available as ``discarded_samples``.

    Parameters
    ----------
    path : path-like
    channel : int
    segment_len : int
        Samples per segment.
    stride : int
        Yield every ``stride``-th segment (1 = all).
    first, last : int
        Segment index range ``[first, last)`` to visit.
    """

    def __init__(self, path, channel: int, segment_len: int, stride: int = 1, first: int = 0, last=None):
        if segment_len <= 0:
            raise ValueError("segment_len must be positive")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.path = Path(path)
        self.header = read_header(self.path)
        self.header._check_channel(channel)
        self.channel = channel
        self.segment_len = int(segment_len)
        self.stride = int(stride)
        length = self.header.channel_lengths[channel]
        self.n_segments = length // self.segment_len
        self.discarded_samples = length - self.n_segments * self.segment_len
        self.first = int(first)
        self.last = self.n_segments if last is None else min(int(last), self.n_segments)

    @property
    def sample_rate(self) -> int:
        return self.header.sample_rate

    def indices(self) -> range:
        return range(self.first, self.last, self.stride)

    def __len__(self) -> int:
        return len(self.indices())

    def segment(self, index: int):
        return read_range(
            self.path, self.channel, index * self.segment_len, self.segment_len, self.header
        )

    def __iter__(self) -> Iterator:
        for i in self.indices():
            yield self.segment(i)


def read_segments(path, channel: int, segment_len: int, stride: int = 1) -> SegmentReader:
    """Stream non-overlapping segments of ``channel``; see :class:`SegmentReader`."""
    return SegmentReader(path, channel, segment_len, stride)
