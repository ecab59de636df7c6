"""Exception types shared across the package."""


class MapUpdateError(Exception):
    """Base class for all package errors."""


class DomainError(MapUpdateError):
    """Input violates a documented precondition (out-of-extent point, empty set, ...)."""


class ParseError(MapUpdateError):
    """Malformed serialized data.

    Carries ``byte_offset`` pointing at the record that failed to parse.
    """

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ConfigError(MapUpdateError):
    """Invalid configuration value or unknown configuration key."""


class CheckpointError(MapUpdateError):
    """Checkpoint file is unreadable or does not match the expected model config."""


class TrainingError(MapUpdateError):
    """Training aborted (non-finite loss or similar)."""
