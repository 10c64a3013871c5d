"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class ItasError(Exception):
    exit_code = 1


class ConfigError(ItasError):
    exit_code = 2


class DataError(ItasError):
    exit_code = 3


class FormatError(DataError):
    pass


class LabelingError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class PairingError(DataError):
    pass


class LabelSpaceError(DataError):
    pass


class BudgetError(ItasError):
    exit_code = 4


class PoolError(BudgetError):
    pass


class NumericError(ItasError):
    exit_code = 5


class ShapeError(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass


class DeterminismError(NumericError):
    pass


class CacheError(ItasError):
    exit_code = 6


class RunDirError(ItasError):
    exit_code = 7
