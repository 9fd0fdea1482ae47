"""Exception hierarchy shared by the library and the command line."""


class MPTaylorError(Exception):
    """Base class for every error raised by mptaylor."""

    exit_code = 1


class ConfigurationError(MPTaylorError, ValueError):
    """Invalid precision, integrator, sweep or manifest settings."""

    exit_code = 2


class ParseError(ConfigurationError):
    """Malformed decimal literal or system description."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PrecisionMismatch(MPTaylorError, TypeError):
    """Arithmetic between values bound to different precision contexts."""


class NumericFailure(MPTaylorError, ArithmeticError):
    """Overflow, NaN or infinity produced during integration."""

    exit_code = 3

    def __init__(self, message, step_index=None):
        if step_index is not None:
            message = f"step {step_index}: {message}"
        super().__init__(message)
        self.step_index = step_index


class VerificationRefused(MPTaylorError):
    """Two runs agree on fewer digits than were requested for publication."""

    exit_code = 4


class DeterminismError(MPTaylorError):
    """Runs that must be bitwise identical produced different output."""

    exit_code = 3
