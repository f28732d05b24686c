"""Exception types shared across the package."""


class AlignLabError(Exception):
    """Base class for every error raised by alignlab."""


class DimensionError(AlignLabError, ValueError):
    pass


class NumericError(AlignLabError, ArithmeticError):
    pass


class ConfigError(AlignLabError, ValueError):
    """Invalid or inconsistent configuration, detected before allocation."""


class UsageError(AlignLabError, ValueError):
    """An operation was called with arguments outside its contract."""


class TrainingError(AlignLabError, RuntimeError):
    pass


class CheckpointError(AlignLabError, IOError):
    pass
