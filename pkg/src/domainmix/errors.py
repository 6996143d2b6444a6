"""Exception types raised across the package."""


class DomainMixError(Exception):
    pass


class DimensionError(DomainMixError, ValueError):
    """Operand shapes do not conform."""


class NumericError(DomainMixError, ArithmeticError):
    """A non-finite value showed up where finite values are required."""


class TapeError(DomainMixError, RuntimeError):
    """Backward was requested without a matching forward pass."""


class ConfigError(DomainMixError, ValueError):
    pass


class ProtocolError(DomainMixError, ValueError):
    """An evaluation precondition (e.g. query has no gallery match) is violated."""


class ContractError(DomainMixError, ValueError):
    """A loss precondition is violated (e.g. anchor without a negative)."""
