"""Error taxonomy shared by all modules.

Validation-type errors (bad config, bad shapes, protocol misuse, bad input
files) map to CLI exit code 1; runtime failures (numeric blowups, I/O while
writing) map to exit code 2.
"""


class SmearSslError(Exception):
    """Base class for all package errors."""


class ValidationError(SmearSslError):
    """Bad configuration value or malformed/missing input."""


class DimensionError(ValidationError):
    """Shapes or extents do not agree."""


class ParameterError(ValidationError):
    """A numeric parameter is out of its legal range."""


class ProtocolError(ValidationError):
    """An evaluation/training protocol precondition is violated."""


class InputError(ValidationError):
    """An input file or image is unusable."""


class NumericError(SmearSslError):
    """A non-finite value surfaced where finiteness is required."""
