"""Exception types shared across the package."""


class HrlcapError(Exception):
    """Base class for all package errors."""


class DimensionError(HrlcapError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HrlcapError, ValueError):
    """A documented precondition was violated."""


class NumericError(HrlcapError, FloatingPointError):
    """A computation produced NaN or Inf."""


class InputError(HrlcapError, ValueError):
    """Bad user-supplied data (empty sequences, missing labels, ...)."""


class LoadError(HrlcapError, IOError):
    """A file could not be read or failed validation."""


class ModelStateError(HrlcapError, RuntimeError):
    """The model or trainer is not in a state that permits the call."""
