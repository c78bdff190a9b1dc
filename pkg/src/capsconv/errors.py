"""Exception hierarchy for capsconv."""

from typing import Optional


class CapsConvError(Exception):
    """Base class for all capsconv errors."""


class ShapeError(CapsConvError, ValueError):
    """Operand shapes are inconsistent with each other or with the shape law."""


class BoundsError(CapsConvError, IndexError):
    """A coordinate lies outside the extent it indexes."""


class NonFiniteError(CapsConvError, ValueError):
    """A tensor contains NaN or Inf scalars."""


class TapeMismatchError(CapsConvError, ValueError):
    """An activation tape does not belong to the network it is replayed on."""


class ConfigError(CapsConvError, ValueError):
    """A configuration file or option is malformed.

    Attributes:
        field: Dotted name of the offending field, if known
        line: 1-based line number in the config file, if known
    """

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")
