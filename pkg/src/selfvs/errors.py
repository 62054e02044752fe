"""Exception types shared across the package."""


class SelfVSError(Exception):
    """Base class for all package errors."""


class DimensionError(SelfVSError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SelfVSError, ValueError):
    """A configuration value is outside its allowed range."""


class ContractError(SelfVSError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(SelfVSError, ValueError):
    """A binary or serialized file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(SelfVSError, ValueError):
    """Dataset content violates an invariant."""

    def __init__(self, message, video_id=None, field=None):
        prefix = ""
        if video_id is not None:
            prefix += f"video {video_id!r}"
            if field is not None:
                prefix += f", field {field!r}"
            prefix += ": "
        super().__init__(prefix + message)
        self.video_id = video_id
        self.field = field


class DatasetError(ValidationError):
    """A sample lacks data required by the requested operation."""


class UndefinedMetricError(SelfVSError, ArithmeticError):
    """A metric is mathematically undefined for the given inputs."""
