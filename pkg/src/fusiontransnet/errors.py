"""Exception hierarchy shared by every module."""


class FTNError(Exception):
    """Base class for all package errors."""


class DimensionError(FTNError, ValueError):
    pass


class NumericError(FTNError, ArithmeticError):
    pass


class ContractError(FTNError, RuntimeError):
    pass


class ConfigError(FTNError, ValueError):
    pass


class IngestionError(FTNError, ValueError):
    pass


class DataError(FTNError, ValueError):
    pass


class TrainingError(FTNError, RuntimeError):
    pass
