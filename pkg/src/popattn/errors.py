"""Exception types shared across the package."""


class PopattnError(Exception):
    """Base class for all package errors."""


class ShapeError(PopattnError, ValueError):
    """Operand shapes do not conform."""


class InvalidInputError(PopattnError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(PopattnError, ValueError):
    """A binary or text artifact is malformed."""


class CompatibilityError(PopattnError):
    """Artifacts produced under different configurations were combined."""


class TrainingError(PopattnError, RuntimeError):
    """Training diverged (non-finite loss)."""
