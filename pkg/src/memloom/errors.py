"""Exception hierarchy shared across memloom modules."""

from __future__ import annotations


class MemloomError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(MemloomError, ValueError):
    """An operation received an argument outside its domain."""


class OutOfRangeError(ArgumentError):
    """A timestamp or index fell outside the valid range."""


class ConfigurationError(MemloomError):
    """Missing or inconsistent configuration (env vars, vocabularies, config files)."""


class FormatError(MemloomError):
    """A file did not match its declared on-disk format."""


class BackendError(MemloomError):
    """A remote backend could not be reached or kept failing."""

    def __init__(self, message: str, endpoint: str = "", attempts: int = 0, status: int | None = None):
        super().__init__(message)
        self.endpoint = endpoint
        self.attempts = attempts
        self.status = status


class ProtocolError(BackendError):
    """A backend answered, but the response broke the wire contract."""


class RequestTooLargeError(BackendError):
    """A request body exceeded the endpoint's configured payload limit."""


class AnswerParseError(MemloomError):
    """A reasoner completion contained no recognizable option choice."""

    def __init__(self, raw: str):
        super().__init__(f"could not parse an option index from completion: {raw!r}")
        self.raw = raw


class PromptTooLongError(MemloomError):
    """The Q&A prompt exceeds the configured character budget."""


class PipelineError(MemloomError):
    """A pipeline run aborted part way; carries how far it got."""

    def __init__(self, message: str, completed_chunks: int = 0, cause: Exception | None = None):
        super().__init__(message)
        self.completed_chunks = completed_chunks
        self.cause = cause
