"""Exception types shared across the package."""


class LocaframeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(LocaframeError, ValueError):
    pass


class MalformedSpec(LocaframeError, ValueError):
    """Raised when a representation string does not follow the grammar.

    Attributes:
        offset: byte offset of the first offending character in the input.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnsupportedDegree(LocaframeError, ValueError):
    pass


class DecompositionFailed(LocaframeError, RuntimeError):
    """An intertwiner failed its own residual check. Indicates a bug."""


class DegenerateFrame(LocaframeError, ValueError):
    pass


class NegativeDistance(LocaframeError, ValueError):
    pass


class NotNormalized(LocaframeError, ValueError):
    pass


class UnknownParam(LocaframeError, KeyError):
    pass


class ConfigError(LocaframeError, ValueError):
    """Invalid configuration. The message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class TrainingDiverged(LocaframeError, RuntimeError):
    pass


class DisconnectedGraph(UserWarning):
    """Warning: a learnable parameter never took part in the recorded computation."""
