"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operands do not conform (wrong extents or channel widths)."""


class NumericError(ArithmeticError):
    """A non-finite or degenerate value surfaced where finite math was required."""


class ConfigError(ValueError):
    """Invalid configuration; carries a field path where possible."""


class ProtocolError(RuntimeError):
    """A call sequence contract was violated (e.g. missing gradients)."""


class FormatError(ValueError):
    """A file did not match its declared on-disk format."""
