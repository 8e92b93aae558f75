"""Exception hierarchy shared across the package."""


class KarmaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KarmaError):
    """Operands have incompatible shapes."""


class ConfigError(KarmaError):
    """A configuration value violates its contract."""


class ContractError(KarmaError):
    """An operation was called outside its contract (misuse, not bad data)."""


class DataError(KarmaError):
    """Input data could not be parsed or fails a structural invariant."""


class DivergenceError(KarmaError):
    """Training produced a non-finite loss."""
