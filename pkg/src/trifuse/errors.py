"""Exception types shared across the package."""


class TrifuseError(Exception):
    """Base class for all package errors."""


class DimensionError(TrifuseError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TrifuseError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(TrifuseError, ValueError):
    """A tensor would contain NaN or Inf."""


class ParseError(TrifuseError, ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(TrifuseError, ValueError):
    """File contents decoded but are not usable (e.g. NaN payload)."""


class ConfigError(TrifuseError, ValueError):
    """Configuration or manifest is inconsistent with the requested run."""
