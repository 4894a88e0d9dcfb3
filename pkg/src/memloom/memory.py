"""Text memory of a video: timestamped, kind-tagged caption entries.

A :class:`CaptionLog` is the only representation of the video that the
question-answering model ever sees. Entries are kept in a canonical order so
that the rendered log depends only on *what* was inserted, never on the order
in which backend calls completed.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from memloom.errors import ArgumentError, FormatError, OutOfRangeError

SCENE_PROMPT = (
    "Describe the scene as specifically as possible focusing on objects and their "
    "properties and their relations to other objects in the scene. Be as concise as "
    "possible like you are writing a log."
)


class CaptionKind(str, enum.Enum):
    ACTION = "action"
    SCENE = "scene"

    @property
    def tag(self) -> str:
        """Bracketed tag used in rendered log lines, e.g. ``[SCENE]``."""
        return f"[{self.name}]"


@dataclass(frozen=True)
class ControlToken:
    """Special vocabulary token that steers the hybrid captioner."""

    kind: CaptionKind
    surface: str

    def __post_init__(self):
        if _SURFACES.get(self.kind) != self.surface:
            raise ArgumentError(f"{self.surface!r} is not the control token for {self.kind.value}")

    @classmethod
    def for_kind(cls, kind: CaptionKind) -> "ControlToken":
        return cls(kind, _SURFACES[CaptionKind(kind)])

    @classmethod
    def from_surface(cls, surface: str) -> "ControlToken":
        for kind, s in _SURFACES.items():
            if s == surface:
                return cls(kind, s)
        raise ArgumentError(f"unknown control token {surface!r}")


_SURFACES = {CaptionKind.ACTION: "[ACX]", CaptionKind.SCENE: "[SCX]"}
ACX = ControlToken(CaptionKind.ACTION, "[ACX]")
SCX = ControlToken(CaptionKind.SCENE, "[SCX]")


@dataclass(frozen=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ArgumentError(f"interval bounds must be finite, got [{self.start}, {self.end})")
        if self.start < 0:
            raise ArgumentError(f"interval start must be non-negative, got {self.start}")
        if self.end <= self.start:
            raise ArgumentError(f"interval end {self.end} must exceed start {self.start}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class CaptionEntry:
    """One line of the memory.

    ``text`` is stripped, and internal line breaks are folded into single
    spaces so that an entry always renders to exactly one log line.
    """

    at: float
    kind: CaptionKind
    text: str
    source: str = "mock"

    def __post_init__(self):
        if not math.isfinite(self.at) or self.at < 0:
            raise ArgumentError(f"entry timestamp must be finite and >= 0, got {self.at}")
        object.__setattr__(self, "kind", CaptionKind(self.kind))
        text = re.sub(r"\s*[\r\n]+\s*", " ", str(self.text)).strip()
        if not text:
            raise ArgumentError("caption text must be non-empty")
        object.__setattr__(self, "text", text)

    def sort_key(self) -> tuple:
        # Scene before action at equal timestamps; text/source make the order total.
        return (self.at, 0 if self.kind is CaptionKind.SCENE else 1, self.text, self.source)


@dataclass(frozen=True)
class CaptionLog:
    video_id: str
    duration: float
    entries: tuple[CaptionEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not math.isfinite(self.duration) or self.duration <= 0:
            raise ArgumentError(f"log duration must be positive, got {self.duration}")
        entries = tuple(self.entries)
        for e in entries:
            _check_in_range(e, self.duration)
        object.__setattr__(self, "entries", tuple(sorted(entries, key=CaptionEntry.sort_key)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CaptionEntry]:
        return iter(self.entries)

    def count(self, kind: CaptionKind) -> int:
        kind = CaptionKind(kind)
        return sum(1 for e in self.entries if e.kind is kind)


def _check_in_range(entry: CaptionEntry, duration: float) -> None:
    if entry.at >= duration:
        raise OutOfRangeError(f"entry at t={entry.at} is not before the log duration {duration}")


def log_insert(log: CaptionLog, entry: CaptionEntry) -> CaptionLog:
    """Return a new log with ``entry`` placed at its canonical position."""
    _check_in_range(entry, log.duration)
    entries = list(log.entries)
    bisect.insort_right(entries, entry, key=CaptionEntry.sort_key)
    return CaptionLog(log.video_id, log.duration, tuple(entries))


def log_extend(log: CaptionLog, entries: Iterable[CaptionEntry]) -> CaptionLog:
    for e in entries:
        log = log_insert(log, e)
    return log


def format_timestamp(seconds: float) -> str:
    """``125`` -> ``"02:05"``. Sub-second precision is truncated."""
    total = int(math.floor(seconds))
    minutes, secs = divmod(total, 60)
    return f"{minutes:02d}:{secs:02d}"


def render_entry(entry: CaptionEntry) -> str:
    return f"t={format_timestamp(entry.at)} {entry.kind.tag} {entry.text}"


def render_log(log: CaptionLog) -> str:
    return "\n".join(render_entry(e) for e in log.entries)


_LINE_RE = re.compile(r"^t=(\d{2,}):(\d{2}) \[(ACTION|SCENE)\] (.+)$")


def parse_log_line(line: str) -> tuple[int, CaptionKind, str]:
    """Inverse of :func:`render_entry` up to whole-second resolution.

    Returns ``(seconds, kind, text)``.
    """
    m = _LINE_RE.match(line)
    if m is None:
        raise FormatError(f"not a caption log line: {line!r}")
    minutes, secs, kind, text = m.groups()
    if int(secs) >= 60:
        raise FormatError(f"seconds field out of range in {line!r}")
    return int(minutes) * 60 + int(secs), CaptionKind[kind], text


# -- line-delimited JSON persistence --


def log_to_jsonl(log: CaptionLog) -> str:
    lines = [json.dumps({"video_id": log.video_id, "duration": log.duration}, ensure_ascii=False)]
    for e in log.entries:
        lines.append(
            json.dumps({"at": e.at, "kind": e.kind.value, "text": e.text, "source": e.source}, ensure_ascii=False)
        )
    return "\n".join(lines) + "\n"


def log_from_jsonl(text: str) -> CaptionLog:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise FormatError("caption log file is empty")
    try:
        header = json.loads(rows[0])
        video_id, duration = str(header["video_id"]), float(header["duration"])
        entries = []
        for ln in rows[1:]:
            rec = json.loads(ln)
            entries.append(CaptionEntry(float(rec["at"]), CaptionKind(rec["kind"]), rec["text"], rec.get("source", "mock")))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed caption log record: {exc}") from exc
    return CaptionLog(video_id, duration, tuple(entries))


# -- Q&A tasks --


@dataclass(frozen=True)
class McqTask:
    """Five-option multiple-choice question about one video."""

    question: str
    options: tuple[str, ...]
    gold: int | None = None
    task_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != 5:
            raise ArgumentError(f"a task needs exactly 5 options, got {len(self.options)}")
        if self.gold is not None and not (isinstance(self.gold, int) and 0 <= self.gold <= 4):
            raise ArgumentError(f"gold must index one of the 5 options, got {self.gold!r}")

    def to_record(self) -> dict:
        rec = {"id": self.task_id, "question": self.question, "options": list(self.options)}
        if self.gold is not None:
            rec["gold"] = self.gold
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "McqTask":
        try:
            return cls(rec["question"], tuple(rec["options"]), rec.get("gold"), rec.get("id"))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed task record: {exc}") from exc


@dataclass(frozen=True)
class PipelineDefaults:
    uniform_interval: float = 120.0
    repetition_penalty: float = 3.0
    penalty_sweep: tuple[float, ...] = (1.0, 1.2, 1.5, 2.0, 3.0)
    scene_prompt: str = SCENE_PROMPT
    distill_sample_frames: int = 32
    chunk_len: float = 4.0
    chunk_stride: float | None = None  # None: non-overlapping, stride == chunk_len
    max_prompt_chars: int = 200_000

    def __post_init__(self):
        if self.uniform_interval <= 0:
            raise ArgumentError("uniform_interval must be positive")
        if self.repetition_penalty < 1:
            raise ArgumentError("repetition_penalty must be >= 1")
        if self.chunk_len <= 0:
            raise ArgumentError("chunk_len must be positive")
        if self.chunk_stride is not None and self.chunk_stride <= 0:
            raise ArgumentError("chunk_stride must be positive")
        if self.distill_sample_frames < 1:
            raise ArgumentError("distill_sample_frames must be >= 1")
