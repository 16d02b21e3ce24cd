"""Exception hierarchy.

Each class maps onto one CLI exit code, so scripts can tell a bad config
apart from bad input data or a failed computation.
"""


class PatchAttrError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ConfigurationError(PatchAttrError, ValueError):
    exit_code = 2


class ShapeError(PatchAttrError, ValueError):
    exit_code = 3


class DataFormatError(PatchAttrError, ValueError):
    exit_code = 3


class FingerprintMismatchError(DataFormatError):
    """Artifacts produced under different configurations were mixed."""


class LookupFailure(PatchAttrError, KeyError):
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ComputeError(PatchAttrError, RuntimeError):
    exit_code = 4


class IncompleteMatrixError(ComputeError):
    """Raised when finalizing an attribution matrix that still has missing rows."""
