"""Exception hierarchy shared by every stage of the pipeline."""


class XTransCTError(Exception):
    """Base class for all package errors."""


class ContractError(XTransCTError, ValueError):
    """An operation was called with arguments violating its precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigurationError(XTransCTError, ValueError):
    """A configuration value is invalid or inconsistent with another one."""


class FormatError(XTransCTError, ValueError):
    """A file on disk does not match its declared format."""


class NumericError(XTransCTError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""
