"""Exception hierarchy shared by every stage of the codec.

Each class carries the process exit code the command-line front end uses.
"""


class CodecError(Exception):
    exit_code = 1


class ValidationError(CodecError, ValueError):
    """Input violates a documented precondition (alphabet, finiteness, ...)."""

    exit_code = 2


class IntegrityError(CodecError):
    """Container or permutation is internally inconsistent."""

    exit_code = 3


class ConfigurationError(CodecError):
    """Model, sensor or bitstream configuration do not agree."""

    exit_code = 4


class TruncationError(IntegrityError):
    exit_code = 5


class NumericError(CodecError, ArithmeticError):
    """Non-finite activation or gradient."""

    exit_code = 6


class FormatError(ValidationError):
    """A file on disk does not follow its record layout."""

    exit_code = 7


class TrainingError(NumericError):
    """Training diverged; ``last_good`` holds the parameters before the bad step."""

    exit_code = 8

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
