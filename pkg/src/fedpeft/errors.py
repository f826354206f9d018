"""Exception types raised across the package."""


class FedPeftError(Exception):
    """Base class for all errors raised by fedpeft."""


class ShapeError(FedPeftError, ValueError):
    pass


class RankError(FedPeftError, ValueError):
    pass


class NumericError(FedPeftError, ArithmeticError):
    pass


class ConfigError(FedPeftError, ValueError):
    pass


class DataError(FedPeftError, ValueError):
    pass


class PartitionError(FedPeftError, ValueError):
    pass


class ProtocolError(FedPeftError, RuntimeError):
    pass


class ComparisonError(FedPeftError, ValueError):
    pass
