"""Exception hierarchy shared by every module."""


class PoseFieldError(Exception):
    """Base class for all package errors."""


class DegenerateQuaternion(PoseFieldError, ValueError):
    pass


class DimensionMismatch(PoseFieldError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    """Checkpoint or array shape incompatible with the skeleton."""


class InsufficientData(PoseFieldError, ValueError):
    pass


class ConfigError(PoseFieldError, ValueError):
    pass


class NumericalError(PoseFieldError, ArithmeticError):
    pass


class TrainingAborted(NumericalError):
    """Training hit a non-finite loss; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []


class SamplingError(PoseFieldError, RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = [] if partial is None else partial


class FormatError(PoseFieldError, ValueError):
    """Malformed binary file (bad magic, unreadable header)."""


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass
