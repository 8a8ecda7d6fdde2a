"""Exception hierarchy.

Every error raised by this package derives from StwindError so callers can
catch broadly; the CLI maps subclasses onto exit codes (config=2, data=3,
numerical=4).
"""


class StwindError(Exception):
    """Base class for all package errors."""


class ConfigError(StwindError):
    """Invalid or unknown configuration key/value."""


class DataError(StwindError):
    """Base class for ingestion and alignment failures."""


class ParseError(DataError):
    """Malformed field in an input file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DataError):
    """Value outside its physical or declared domain."""


class SchemaError(DataError):
    """Missing or mislabeled column / variable / unit."""


class ConflictError(DataError):
    """Duplicate (site, time) key."""


class GridError(DataError):
    """Timestamps do not form the declared uniform grid."""


class CoverageError(DataError):
    """A series does not cover the requested window."""


class InsufficientDataError(DataError):
    """Fewer samples than an operation requires."""


class FeatureInputError(DataError):
    """A variable needed to build a derived feature is absent."""


class DegenerateGeometryError(StwindError):
    """Station geometry does not support the requested fit (collinear, near-equator)."""


class UnderdeterminedError(StwindError):
    """Fewer regression rows than columns."""


class EstimationError(StwindError):
    """A statistical estimate cannot be formed from the given window."""


class NumericalError(StwindError):
    """Linear-algebra failure that survived jitter escalation."""


class FitError(StwindError):
    """All optimizer starts failed; carries per-start diagnostics."""

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = tuple(diagnostics)


class SizeLimitError(StwindError):
    """Request exceeds a configured dense-algebra limit."""


class EvaluationError(StwindError):
    """A fitted model cannot be evaluated at the requested point."""


class BoundsError(StwindError):
    """Requested coordinates fall outside the projection bounding box."""
