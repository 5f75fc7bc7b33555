# Error types for the apcir pipeline


class ApcirError(Exception):
    """Base class for every error raised by apcir."""

    stage = None


class ParseError(ApcirError, ValueError):
    """Malformed input text (JSON, qrels, run files)."""

    def __init__(self, message, line=None, position=None):
        self.line = line
        self.position = position
        if line is not None:
            where = f"line {line}" if position is None else f"line {line}, position {position}"
            message = f"{where}: {message}"
        super().__init__(message)


class SchemaError(ApcirError, ValueError):
    """Well-formed input that violates the documented schema."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message)


class ConflictError(ApcirError, ValueError):
    """Duplicate keys in qrels, runs or corpora."""


class ConfigError(ApcirError, ValueError):
    pass


class BackendError(ApcirError):
    """The chat backend failed or a mock fixture had no canned response."""


class StageError(ApcirError):
    """A pipeline stage failed; wraps the original error with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
