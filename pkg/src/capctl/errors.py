"""Exception types shared across the package."""


class CapctlError(Exception):
    """Base class for all package errors."""


class DimensionError(CapctlError, ValueError):
    """Tensor extents incompatible for the requested operation."""


class ContractError(CapctlError, ValueError):
    """An operation was called outside its documented contract."""


class NumericError(CapctlError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(CapctlError, ValueError):
    """Invalid configuration value."""


class LexiconError(CapctlError, KeyError):
    """Token id or string outside the closed lexicon."""


class DataError(CapctlError, ValueError):
    """Dataset or checkpoint contents incompatible with the caller."""
