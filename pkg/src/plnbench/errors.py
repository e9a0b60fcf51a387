"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class PlnBenchError(Exception):
    """Base class for all errors raised by plnbench."""


class IngestionError(PlnBenchError, ValueError):
    """A count table or truth file does not conform to the expected format."""


class EmptyInputError(IngestionError):
    """The input file exists but holds no data."""


class ValidationError(PlnBenchError, ValueError):
    """Arguments are inconsistent with an operation's preconditions."""


class ConvergenceError(PlnBenchError, ArithmeticError):
    """A numerical routine produced non-finite values or failed to converge."""
