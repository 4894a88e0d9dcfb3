"""Text-memory pipeline for long-form video question answering."""

from memloom.errors import (
    AnswerParseError,
    ArgumentError,
    BackendError,
    ConfigurationError,
    FormatError,
    MemloomError,
    PipelineError,
    ProtocolError,
    RequestTooLargeError,
)
from memloom.memory import (
    ACX,
    SCX,
    CaptionEntry,
    CaptionKind,
    CaptionLog,
    ControlToken,
    McqTask,
    PipelineDefaults,
    TimeInterval,
    log_insert,
    render_log,
)

__version__ = "0.1.0"
