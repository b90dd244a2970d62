"""Exception taxonomy shared across the package.

CLI exit codes: 2 usage, 3 validation, 4 numerical health.
"""


class TokrateError(Exception):
    """Base class for all package errors."""


class FormatError(TokrateError):
    """Malformed file (bad WAV header, bad manifest line)."""


class UnsupportedFormatError(TokrateError):
    """Well-formed file in a format we deliberately do not handle."""


class RangeError(TokrateError):
    """Value outside its documented domain (e.g. sample outside [-1, 1])."""


class ShapeError(TokrateError):
    """Tensor/array shape incompatible with the operation contract."""


class ConfigError(TokrateError):
    """Invalid or inconsistent configuration."""


class ValidationError(TokrateError):
    """Data fails an invariant check (manifest tiling, checkpoint compat)."""


class NumericalHealthError(TokrateError):
    """NaN/Inf encountered in a forward/backward pass or gradient."""


class ExtractionError(TokrateError):
    """No qualifying low-energy window for silence extraction."""


class AlignmentError(TokrateError):
    """Forced alignment infeasible for the given target."""


class InitError(TokrateError):
    """Initialization precondition violated (e.g. too few k-means samples)."""
