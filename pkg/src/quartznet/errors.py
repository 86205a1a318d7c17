"""Exception types shared across the toolkit."""


class QuartzNetError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QuartzNetError, ValueError):
    pass


class ContractError(QuartzNetError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(QuartzNetError, ValueError):
    pass


class FormatError(QuartzNetError, ValueError):
    """A file on disk does not match the expected format."""


class DataError(QuartzNetError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class NumericError(QuartzNetError, ArithmeticError):
    """Non-finite values showed up where they must not (e.g. gradients)."""


class InfeasibleTarget(UserWarning):
    """Issued when a CTC target cannot be aligned to the available frames."""
