"""Synthetic axion-haloscope time series, denoising benchmark and limit analysis."""

from .exceptions import (
    CommandNotFoundError,
    ContainerError,
    DataError,
    ExternalDenoiserError,
    ExternalExitError,
    ExternalTimeoutError,
    HaloscopeError,
    LengthMismatchError,
    NumericalError,
)
from .model import (
    ChannelRole,
    FloatSeries,
    PhysicalConstants,
    PowerSpectrum,
    SampleSeries,
    quantize_millivolts,
    raw_to_millivolts,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelRole",
    "CommandNotFoundError",
    "ContainerError",
    "DataError",
    "ExternalDenoiserError",
    "ExternalExitError",
    "ExternalTimeoutError",
    "FloatSeries",
    "HaloscopeError",
    "LengthMismatchError",
    "NumericalError",
    "PhysicalConstants",
    "PowerSpectrum",
    "SampleSeries",
    "quantize_millivolts",
    "raw_to_millivolts",
    "__version__",
]
