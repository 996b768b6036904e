"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A value became NaN or infinite."""


class ParseError(ValueError):
    """Architecture string could not be parsed.

    Carries the byte offset of the offending token in ``offset``.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class RewriteError(ValueError):
    """Architecture rewrite rule could not be applied."""


class BuildError(ValueError):
    """Network could not be assembled from an architecture spec."""


class ConfigError(ValueError):
    """Run configuration is malformed or contains unknown keys."""
