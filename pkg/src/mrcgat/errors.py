"""Exception hierarchy shared across the package."""


class MrcGatError(Exception):
    """Base class for all package errors."""


class DomainError(MrcGatError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ShapeError(MrcGatError, ValueError):
    """Operand shapes do not conform."""


class NotSPDError(MrcGatError, ValueError):
    """Matrix is not symmetric positive definite."""


class SchemaError(MrcGatError, ValueError):
    """Input file or model document does not match the expected schema."""


class RowError(SchemaError):
    """A data row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(MrcGatError, ValueError):
    """Invalid configuration value."""


class DegenerateEpisodeError(MrcGatError, ValueError):
    """Episode too small for the requested statistic."""


class SamplingError(MrcGatError, ValueError):
    """Not enough labeled subjects to draw an episode."""


class GraphError(MrcGatError, RuntimeError):
    """Graph construction violated a structural contract."""


class NumericalError(MrcGatError, ArithmeticError):
    """Non-finite value encountered during training or inference."""


class LeakageError(MrcGatError, RuntimeError):
    """An evaluation support set touched the held-out fold."""
