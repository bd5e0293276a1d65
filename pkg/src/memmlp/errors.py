"""Exception types shared across the package."""


class MemMLPError(Exception):
    """Base class for package errors."""


class InvalidInputError(MemMLPError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class DegenerateRotationError(MemMLPError, ValueError):
    """A 6D rotation whose columns cannot be orthonormalized."""


class ShapeError(MemMLPError, ValueError):
    pass


class RangeError(MemMLPError, IndexError):
    pass


class ClipFormatError(MemMLPError, IOError):
    """A motion clip file could not be parsed or failed validation."""


class CheckpointError(MemMLPError, IOError):
    pass


class FrozenError(MemMLPError, RuntimeError):
    """Attempt to train or update a frozen prior."""


class OptimizerAbort(MemMLPError, ArithmeticError):
    """L-BFGS hit a non-finite objective or gradient."""


class ConfigError(MemMLPError, ValueError):
    pass
