"""Exception hierarchy.  Every error carries enough context to act on."""


class EattsError(Exception):
    """Base class for all package errors."""

    kind = "error"


class DimensionError(EattsError, ValueError):
    kind = "dimension"


class DegenerateVectorError(EattsError, ValueError):
    kind = "degenerate"


class NumericFaultError(EattsError, FloatingPointError):
    kind = "numeric_fault"

    def __init__(self, message, name=None, step=None):
        super().__init__(message)
        self.name = name
        self.step = step


class EmptyInputError(EattsError, ValueError):
    kind = "empty_input"


class ParameterError(EattsError, ValueError):
    kind = "parameter"


class SampleRateError(EattsError, ValueError):
    kind = "sample_rate"


class EstimationError(EattsError, ValueError):
    kind = "estimation"


class SamplingError(EattsError, ValueError):
    kind = "sampling"


class ConfigurationError(EattsError, ValueError):
    kind = "configuration"


class LookupFailure(EattsError, KeyError):
    kind = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(EattsError, ValueError):
    kind = "checkpoint"
