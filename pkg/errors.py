class QflError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigurationError(QflError, ValueError):
    """A parameter or config value violates a precondition."""


class StructuralError(QflError, IndexError):
    """A qubit, parameter or dimension index is out of bounds."""


class InputError(QflError, ValueError):
    """Data handed to an operation is unusable (empty batch, bad range, ...)."""


class NumericalError(QflError, ArithmeticError):
    """A loss or gradient became non-finite."""


class FormatError(QflError, ValueError):
    """A file does not follow the expected binary layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
