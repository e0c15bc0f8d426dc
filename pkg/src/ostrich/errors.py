"""Exception hierarchy shared by every module."""


class OstrichError(Exception):
    """Base class for all package errors."""


class SizeError(OstrichError, ValueError):
    pass


class ShapeError(SizeError):
    pass


class NumericError(OstrichError, FloatingPointError):
    pass


class StateError(OstrichError, RuntimeError):
    pass


class SingularMatrixError(NumericError):
    pass


class DomainError(OstrichError, ValueError):
    pass


class DegenerateHistogramError(OstrichError, ValueError):
    pass


class SeedError(OstrichError, ValueError):
    pass


class DegenerateSampleError(OstrichError, ValueError):
    pass


class DataError(OstrichError, ValueError):
    pass


class FormatError(OstrichError, ValueError):
    pass


class IoError(OstrichError, OSError):
    pass
