"""Exception types shared across the toolkit.

Each class carries the process exit code the CLI maps it to.
"""


class FlowmetaError(Exception):
    exit_code = 1


class UsageError(FlowmetaError):
    exit_code = 1


class FormatError(FlowmetaError):
    """Input bytes or text do not match the expected format."""

    exit_code = 2


class ParseError(FormatError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PreconditionError(FlowmetaError, ValueError):
    exit_code = 3


class NumericalError(FlowmetaError, ArithmeticError):
    exit_code = 4
