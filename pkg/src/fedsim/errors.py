"""Exception hierarchy. The CLI maps each family to an exit code."""


class FedSimError(Exception):
    exit_code = 3


class ConfigError(FedSimError, ValueError):
    exit_code = 1


class DataError(FedSimError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """Malformed dataset file or experiment record."""


class SplitError(DataError):
    pass


class ShapeError(FedSimError, ValueError):
    pass


class NumericError(FedSimError, ArithmeticError):
    pass


class RoundError(FedSimError, RuntimeError):
    pass
