"""Exception hierarchy shared by the library and the CLI."""


class ELAError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ParameterError(ELAError, ValueError):
    """A distribution parameter lies outside its domain."""


class DomainError(ELAError, ValueError):
    """A function argument lies outside the function's domain."""


class StructuralError(ELAError, ValueError):
    """Shapes, lengths or orderings of inputs do not line up."""


class ConfigError(ELAError, ValueError):
    """A run configuration or mapper configuration is invalid."""


class ValidationError(ELAError, ValueError):
    """A trace record or report violates its schema."""


class IngestionError(ELAError, LookupError):
    """Trace data required by a schedule window is missing."""


class NumericalError(ELAError, ArithmeticError):
    """An iterative evaluation failed to converge or produced non-finite values."""

    exit_code = 2


class ReportIOError(ELAError, OSError):
    """Reading or writing a file failed."""

    exit_code = 3
