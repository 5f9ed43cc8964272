class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (replay twice, no tape, ...)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a place where it must not."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""
