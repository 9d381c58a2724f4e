"""Exception hierarchy shared by every module."""


class EpievoError(Exception):
    """Base class for all errors raised by the package."""


class StructuralError(EpievoError):
    """Shapes or layer dimensions do not fit together."""


class InputError(EpievoError, ValueError):
    """An argument value is outside its legal range."""


class UsageError(EpievoError, RuntimeError):
    """An API was called in an order it does not support."""


class ParseError(EpievoError):
    """A data file is malformed.

    ``offset`` is the byte position where parsing stopped, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointError(EpievoError):
    """A checkpoint file could not be read back."""


class InitError(EpievoError):
    """The ecosystem could not be initialised."""
