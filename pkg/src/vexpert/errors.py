"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NumericError(ArithmeticError):
    """An operation received input outside its numeric domain."""


class ContractError(ValueError):
    """A precondition of an operation or object was violated."""


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ContractError):
    """An experiment configuration field is missing, unknown or out of range."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
