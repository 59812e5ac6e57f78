"""Exception hierarchy shared across the package."""


class PlayerFLError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpecError(PlayerFLError, ValueError):
    """A size, count, fraction or other scalar argument is out of range."""


class ShapeError(PlayerFLError, ValueError):
    pass


class InvalidLabelError(PlayerFLError, ValueError):
    pass


class NumericError(PlayerFLError, ArithmeticError):
    """Raised when a non-finite value shows up where it must not."""


class CapacityError(PlayerFLError, ValueError):
    pass


class UndefinedSimilarityError(PlayerFLError, ValueError):
    pass


class ParseError(PlayerFLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(PlayerFLError, RuntimeError):
    pass


class ConfigError(PlayerFLError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IncompleteResultsError(PlayerFLError, RuntimeError):
    pass
