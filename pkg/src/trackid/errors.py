"""Error taxonomy shared by the library and mapped to CLI exit codes."""


class TrackidError(Exception):
    exit_code = 1


class ConfigError(TrackidError):
    exit_code = 2


class DimensionError(ValueError, TrackidError):
    """Shape contract violated; ``axis`` names the offending dimension."""

    exit_code = 2

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class FormatError(TrackidError):
    """Malformed on-disk artifact.  ``kind`` is one of ``magic``, ``version``,
    ``header``, ``truncated`` or ``mismatch``."""

    exit_code = 3

    def __init__(self, message: str, kind: str):
        super().__init__(message)
        self.kind = kind


class PrerequisiteError(TrackidError):
    exit_code = 4

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class NumericError(ArithmeticError, TrackidError):
    exit_code = 5
