"""Exception hierarchy shared across the package.

Class names double as the ``error`` field of the CLI's error JSON, so they
are kept short and stable.
"""


class CCFError(Exception):
    """Base class for all errors raised by ccfuse."""


class IoError(CCFError, OSError):
    """A file could not be read or written."""


class FormatError(CCFError, ValueError):
    """Unsupported or malformed image file."""


class DimensionError(CCFError, ValueError):
    """Image dimensions incompatible with the requested operation."""


class ShapeMismatch(CCFError, ValueError):
    """Two arrays that must share a shape do not."""


class ParamError(CCFError, ValueError):
    """A hyperparameter lies outside its valid domain."""


class UnknownCondition(CCFError, KeyError):
    """Condition id not present in the registry."""

    def __str__(self):
        return Exception.__str__(self)


class LengthMismatch(CCFError, ValueError):
    """Loss vector length differs from the number of gated conditions."""


class NonFiniteLoss(CCFError, ValueError):
    """A NaN/Inf or negative loss was fed to the gate."""


class NonFiniteError(CCFError, FloatingPointError):
    """Sampling produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(CCFError, ValueError):
    """Run configuration is invalid."""


class TraceFormatError(CCFError, ValueError):
    """Selection trace CSV is malformed."""
