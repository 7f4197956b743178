"""Exception types raised across the package."""


class SlaforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(SlaforgeError):
    pass


class BadConfig(ConfigError):
    pass


class DataError(SlaforgeError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class IsolatedNode(DataError):
    pass


class NoConvergence(SlaforgeError, ArithmeticError):
    pass


class NotScalar(ShapeMismatch):
    pass


class UnknownMetric(DataError):
    pass


class UnknownNode(DataError):
    pass


class UnparsableRow(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyInput(DataError):
    pass


class TooShort(DataError):
    pass


class NotFitted(SlaforgeError):
    pass


class MissingMetric(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NoActiveEpisode(SlaforgeError, RuntimeError):
    pass


class Diverged(SlaforgeError, ArithmeticError):
    pass
