"""Exception hierarchy shared across the package."""


class PiclError(Exception):
    """Base class for all errors raised by picl."""


class DegenerateInputError(PiclError, ValueError):
    """A vector with zero (or non-finite) norm reached an operation that needs a direction."""


class ShapeError(PiclError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PiclError, ValueError):
    """A precondition of an operation was violated."""


class DivergenceError(PiclError, FloatingPointError):
    """Training produced non-finite losses, gradients or parameters."""


class ConfigError(PiclError, ValueError):
    """Invalid or incomplete configuration."""


class CheckpointError(PiclError, ValueError):
    """A checkpoint file is malformed or does not match the expected layout."""
