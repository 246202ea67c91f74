"""Exception hierarchy shared by every module."""


class MaskReduceError(Exception):
    """Base class for all errors raised by this package."""


class DuplicateParam(MaskReduceError, ValueError):
    pass


class InvalidView(MaskReduceError, ValueError):
    pass


class InvalidRatio(MaskReduceError, ValueError):
    pass


class InvalidRate(MaskReduceError, ValueError):
    pass


class ShapeMismatch(MaskReduceError, ValueError):
    pass


class NumericalFailure(MaskReduceError, ArithmeticError):
    pass


class UndefinedMetric(MaskReduceError, ZeroDivisionError):
    pass


class MaskMismatch(MaskReduceError):
    """Packed payload was produced under a different mask than the receiver's."""


class CorruptPayload(MaskReduceError, ValueError):
    pass


class LinkError(MaskReduceError, ConnectionError):
    """Transport failure. ``peer`` names the remote side when known."""

    def __init__(self, message, peer=None):
        super().__init__(message if peer is None else f"{message} (peer {peer})")
        self.peer = peer


class ConfigError(MaskReduceError):
    pass


class MissingFile(ConfigError, FileNotFoundError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, lineno=None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


class UnknownKey(ConfigError, KeyError):
    def __str__(self):
        return str(self.args[0])
