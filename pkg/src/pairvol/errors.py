"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError/ContractError/DimensionError -> 2,
FormatError/DataError -> 3, NumericalError -> 4.
"""


class PairvolError(Exception):
    """Base class for all package errors."""


class DimensionError(PairvolError):
    """Tensor or grid shapes are incompatible for the requested operation."""


class ConfigError(PairvolError):
    """A configuration value is out of bounds or inconsistent with another."""


class ContractError(PairvolError):
    """A caller violated an operation's precondition."""


class FormatError(PairvolError):
    """A binary or text file does not match its declared layout."""


class DataError(PairvolError):
    """Required input data is missing or unusable."""


class NumericalError(PairvolError):
    """A computation produced non-finite values or diverged."""
