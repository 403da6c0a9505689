"""Exception types raised by the qres package."""


class QresError(Exception):
    """Base class for all package errors."""


class ConfigError(QresError):
    """Inconsistent or unparseable configuration."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class LayoutError(QresError):
    """Parameter vector dimensions disagree with the dataset."""


class QuadratureError(QresError):
    """Amplitude integrand is not finite at any quadrature node."""


class NoConvergence(QresError):
    """Every optimizer start failed its convergence test."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class SingularInfo(QresError):
    """Fisher information matrix is singular.

    ``null_direction`` holds a unit vector spanning (approximately) the
    null space, expressed in the parameter layout of the matrix.
    """

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class FlatSpectrum(QresError):
    """No spectral bin rises above the noise floor."""


class IngestError(QresError):
    """Malformed external record; ``record`` is the offending line/record number."""

    def __init__(self, message, record=None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record
