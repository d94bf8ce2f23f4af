class VidnumError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidArgumentError(VidnumError, ValueError):
    """A precondition on an argument does not hold."""


class ShapeError(InvalidArgumentError):
    """Operands have incompatible dimensions."""


class ConfigError(InvalidArgumentError):
    """The run configuration is malformed or names an unknown key."""


class FormatError(VidnumError):
    """A file is missing, truncated or not in the expected format."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte offset {offset}")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.offset = offset


class NumericError(VidnumError, ArithmeticError):
    """A computation produced non-finite values."""


class UsageError(VidnumError):
    """The command line could not be parsed."""


def require_same_shape(name_a: str, shape_a: tuple, name_b: str, shape_b: tuple) -> None:
    if tuple(shape_a) != tuple(shape_b):
        raise ShapeError(f"{name_a} has shape {tuple(shape_a)} but {name_b} has shape {tuple(shape_b)}")
