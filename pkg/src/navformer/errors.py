"""Exception types raised across the package."""


class NavFormerError(Exception):
    """Base class for all package errors."""

    code = "NavFormerError"


class NonSymmetric(NavFormerError, ValueError):
    code = "NonSymmetric"


class NonFinite(NavFormerError, ValueError):
    code = "NonFinite"


class InvalidConfig(NavFormerError, ValueError):
    code = "InvalidConfig"


class ShapeMismatch(NavFormerError, ValueError):
    code = "ShapeMismatch"


class EmptyInvariantSet(NavFormerError, ValueError):
    code = "EmptyInvariantSet"


class DegenerateSpectrum(NavFormerError, ValueError):
    """Spectral gap below threshold; ``gaps`` holds the offending values."""

    code = "DegenerateSpectrum"

    def __init__(self, message, gaps=None):
        super().__init__(message)
        self.gaps = gaps


class DetachedGraph(NavFormerError, RuntimeError):
    code = "DetachedGraph"


class InvalidSpec(NavFormerError, ValueError):
    code = "InvalidSpec"


class SchemaMismatch(NavFormerError, ValueError):
    code = "SchemaMismatch"


class ParseError(NavFormerError, ValueError):
    """Malformed CSV content; ``line`` is the 1-based file line number."""

    code = "ParseError"

    def __init__(self, line, message=""):
        super().__init__(f"line {line}: {message}" if message else f"line {line}")
        self.line = line


class TooShort(NavFormerError, ValueError):
    code = "TooShort"


class InvalidFraction(NavFormerError, ValueError):
    code = "InvalidFraction"


class DataError(NavFormerError, ValueError):
    code = "DataError"


class DivergedTraining(NavFormerError, RuntimeError):
    code = "DivergedTraining"


class ConfigError(NavFormerError, ValueError):
    code = "ConfigError"
