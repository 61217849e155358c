"""Exception types shared across the package."""


class HivememError(Exception):
    """Base class for all package errors."""


class ValidationError(HivememError):
    """An argument violates a documented precondition."""


class ConfigurationError(HivememError):
    """Mismatched dimensions, bad config files, unresolvable credentials."""


class EntryNotFoundError(HivememError):
    """Retrieval of an unknown memory entry id (recoverable; the runtime
    treats it as a failed step, not a crash)."""


class SchemaError(HivememError):
    """A persisted trace file violates the event schema."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class BackendFailure(HivememError):
    """An agent backend failed permanently (team fails soft)."""


class TrainingDiverged(HivememError):
    """Training hit a non-finite loss; a checkpoint of the last finite
    state was written before raising."""
