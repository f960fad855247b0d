"""Exception hierarchy shared by every module."""


class CoralError(Exception):
    """Base class for all library errors."""


class DimensionError(CoralError, ValueError):
    """Array shapes or grid sizes do not agree."""


class EmptyDomainError(CoralError, ValueError):
    """A mask or index set selects nothing where at least one element is required."""


class DegenerateError(CoralError, ValueError):
    """Input is numerically degenerate (zero-norm vector, zero variance, zero row mass)."""


class InvalidDistributionError(CoralError, ValueError):
    """A row that must be a probability distribution is not one."""


class ConfigError(CoralError, ValueError):
    """Invalid configuration value."""


class FormatError(CoralError, ValueError):
    """A file on disk does not follow its declared format."""


class NumericalFailure(CoralError, ArithmeticError):
    """Non-finite loss or gradient during training.

    ``diagnostics`` carries whatever the raiser could collect about the
    offending values (typically the attention row that blew up).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
