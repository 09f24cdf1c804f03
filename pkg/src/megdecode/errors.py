"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or inputs have incompatible shapes."""


class DomainError(ValueError):
    """A value lies outside its documented domain."""


class ConfigError(ValueError):
    """A layer, model, or run configuration is inconsistent."""


class DataFormatError(ValueError):
    """A file or stream violates its binary or textual format.

    Carries the byte offset where parsing failed when that is known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(ValueError):
    """Not enough samples to produce even one output element."""


class CapabilityError(RuntimeError):
    """The requested introspection is not available for this model."""


class GradientError(RuntimeError):
    """Backward-pass misuse: bad loss tensor, detached graph, stale state."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
