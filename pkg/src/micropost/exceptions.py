"""Exception hierarchy.

``ConfigurationError`` and ``ValidationError`` map to CLI exit code 2,
everything else deriving from ``MicropostError`` to exit code 3.
"""


class MicropostError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MicropostError, ValueError):
    pass


class ValidationError(MicropostError, ValueError):
    pass


class ProtocolParseError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class NumericError(MicropostError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):
    pass


class LowAcceptanceError(MicropostError):
    def __init__(self, message, accepted_fraction=0.0, voxel=None):
        super().__init__(message)
        self.accepted_fraction = accepted_fraction
        self.voxel = voxel


class InsufficientSamplesError(MicropostError, ValueError):
    pass


class OptimizerFailureError(NumericError):
    pass
