"""Exception hierarchy shared by all modules.

Three failure classes map onto distinct CLI exit codes: input/invariant
violations (validation), file-level problems (I/O, bad or truncated
containers), and numeric breakdown during optimization.
"""


class SlideMilError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(SlideMilError):
    """Invalid input data, configuration, or violated invariant."""

    exit_code = 2


class FormatError(SlideMilError):
    """A file is not in the expected container format (magic/version)."""

    exit_code = 3


class CorruptionError(FormatError):
    """A container file is structurally damaged (truncated, trailing bytes)."""

    exit_code = 3


class NumericError(SlideMilError):
    """Training or evaluation produced non-finite values."""

    exit_code = 4
