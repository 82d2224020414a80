"""Exception hierarchy.

The CLI maps these onto exit codes: data/format problems exit with 3,
numerical failures with 4.
"""


class HaloscopeError(Exception):
    """Base class for all package errors."""


class DataError(HaloscopeError, ValueError):
    """Malformed or inconsistent input data."""


class ContainerError(DataError):
    """Corrupt, truncated or otherwise unreadable ``.tsd`` container."""


class NumericalError(HaloscopeError, ArithmeticError):
    """A fit, calibration or root search could not produce a valid number."""


class ExternalDenoiserError(HaloscopeError):
    """Base class for failures of an external denoiser process."""


class CommandNotFoundError(ExternalDenoiserError):
    pass


class ExternalExitError(ExternalDenoiserError):
    def __init__(self, command, returncode, stderr=""):
        self.command = command
        self.returncode = returncode
        self.stderr = stderr
        msg = f"external denoiser {command!r} exited with status {returncode}"
        if stderr:
            msg += f": {stderr.strip()[-500:]}"
        super().__init__(msg)


class ExternalTimeoutError(ExternalDenoiserError):
    pass


class LengthMismatchError(ExternalDenoiserError, DataError):
    def __init__(self, expected, actual, what="output"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{what} length mismatch: expected {expected} samples, got {actual}"
        )
