"""Exception hierarchy shared by every subsystem."""


class HHHFLError(Exception):
    """Base class for all library errors."""


class ShapeError(HHHFLError, ValueError):
    pass


class PreconditionError(HHHFLError, ValueError):
    pass


class ParseError(HHHFLError, ValueError):
    """A single MindBigData line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None, kind: str = "format"):
        self.line_number = line_number
        self.kind = kind
        where = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{where}{message}")


class ConfigError(HHHFLError, ValueError):
    pass


class DataError(HHHFLError):
    pass


class SerializationError(HHHFLError, ValueError):
    pass


class ProtocolError(HHHFLError):
    pass
