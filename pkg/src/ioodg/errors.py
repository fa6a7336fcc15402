"""Exception hierarchy shared by every module of the package."""


class IOODGError(Exception):
    """Base class for all package errors."""


class NonFinite(IOODGError, ValueError):
    pass


class ShapeMismatch(IOODGError, ValueError):
    pass


class SingularTransform(IOODGError, ValueError):
    pass


class BadConfig(IOODGError, ValueError):
    pass


class BadCount(IOODGError, ValueError):
    pass


class BadRadius(IOODGError, ValueError):
    pass


class EmptyResult(IOODGError, ValueError):
    pass


class EmptyNeighborhood(IOODGError, ValueError):
    pass


class NotScalar(IOODGError, ValueError):
    pass


class BadLabel(IOODGError, ValueError):
    pass


class TooFewPoints(IOODGError, ValueError):
    pass


class ParseError(IOODGError, ValueError):
    """Malformed text input; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno
        self.path = path


class IoError(IOODGError, OSError):
    pass


class CheckpointError(IOODGError, ValueError):
    """Checkpoint file is not in the expected binary layout (bad magic or truncated)."""
