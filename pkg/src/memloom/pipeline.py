"""End-to-end flows: caption-log construction, single-prompt Q&A, distillation export.

Two captioner layouts are supported when building the memory:

``ensemble``
    an action captioner for every chunk plus a separate scene describer
    called at each scene boundary.
``hybrid``
    one captioner for both kinds, steered per request with ``[ACX]`` or
    ``[SCX]``.
"""

from __future__ import annotations

import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

from memloom.backends import ActionCaptioner, ClipRef, Reasoner, SceneDescriber
from memloom.errors import AnswerParseError, ArgumentError, MemloomError, PipelineError, PromptTooLongError
from memloom.io import encode_rgb8
from memloom.memory import (
    ACX,
    SCX,
    CaptionEntry,
    CaptionKind,
    CaptionLog,
    McqTask,
    PipelineDefaults,
    TimeInterval,
    render_log,
)
from memloom.segmentation import (
    DEFAULT_CONTENT_THRESHOLD,
    DEFAULT_CONTENT_WEIGHTS,
    DEFAULT_MIN_SCENE_LEN,
    BoundarySet,
    FeatureSequence,
    FrameRaster,
    boundaries_to_seconds,
    content_scores,
    detect_content_cuts,
    kts_segment,
    segment_uniform,
)

logger = logging.getLogger(__name__)

CaptionerMode = Literal["ensemble", "hybrid"]
DISTILL_VIDEO_COUNT = 350
MIN_TAIL_SECONDS = 1.0


@dataclass(frozen=True)
class VideoSource:
    """What the pipeline knows about one video: its length and optional precomputed media."""

    video_id: str
    duration: float
    features: FeatureSequence | None = None
    frames: Sequence[FrameRaster] | None = None
    frames_fps: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ArgumentError(f"video duration must be positive, got {self.duration}")
        if self.frames is not None and not (self.frames_fps and self.frames_fps > 0):
            raise ArgumentError("frames_fps is required when frames are supplied")

    def frame_at(self, t: float) -> FrameRaster | None:
        if not self.frames:
            return None
        idx = int(math.floor(t * self.frames_fps))
        return self.frames[idx] if 0 <= idx < len(self.frames) else None


# -- segmenters: VideoSource -> BoundarySet in seconds --

Segmenter = Callable[[VideoSource], BoundarySet]


def no_scene_segmenter(source: VideoSource) -> BoundarySet:
    return BoundarySet((), "seconds", source.duration)


def uniform_segmenter(interval: float = 120.0) -> Segmenter:
    def segment(source: VideoSource) -> BoundarySet:
        return segment_uniform(source.duration, interval)
    return segment


def _with_start(b: BoundarySet, duration: float) -> BoundarySet:
    vals = tuple(v for v in b.values if v < duration)
    if not vals or vals[0] > 0:
        vals = (0.0,) + vals
    return BoundarySet(vals, "seconds", duration)


def kts_segmenter(max_segments: int = 32, penalty_weight: float = 1.0, include_start: bool = True) -> Segmenter:
    def segment(source: VideoSource) -> BoundarySet:
        if source.features is None:
            raise ArgumentError(f"KTS needs precomputed features for video {source.video_id}")
        cps = boundaries_to_seconds(kts_segment(source.features, max_segments, penalty_weight), source.features.fps)
        vals = tuple(v for v in cps.values if v < source.duration)
        b = BoundarySet(vals, "seconds", source.duration)
        return _with_start(b, source.duration) if include_start else b
    return segment


def content_segmenter(threshold: float = DEFAULT_CONTENT_THRESHOLD, min_scene_len: int = DEFAULT_MIN_SCENE_LEN,
                      weights: Sequence[float] = DEFAULT_CONTENT_WEIGHTS, include_start: bool = True) -> Segmenter:
    def segment(source: VideoSource) -> BoundarySet:
        if not source.frames:
            raise ArgumentError(f"the content detector needs frames for video {source.video_id}")
        cuts = detect_content_cuts(content_scores(source.frames, weights), threshold, min_scene_len)
        secs = boundaries_to_seconds(cuts, source.frames_fps)
        b = BoundarySet(tuple(v for v in secs.values if v < source.duration), "seconds", source.duration)
        return _with_start(b, source.duration) if include_start else b
    return segment


# -- memory construction --


def chunk_timeline(duration: float, chunk_len: float, stride: float | None = None) -> list[TimeInterval]:
    """Consecutive clips ``[0, c), [c, 2c), ...``; a final partial clip is kept if at least 1 s long."""
    if not (duration > 0 and chunk_len > 0):
        raise ArgumentError(f"duration and chunk_len must be positive, got {duration}, {chunk_len}")
    stride = chunk_len if stride is None else stride
    if not stride > 0:
        raise ArgumentError(f"stride must be positive, got {stride}")
    out = []
    k = 0
    while (start := k * stride) < duration:
        # exact multiples when non-overlapping so consecutive clips share endpoints bit for bit
        full_end = (k + 1) * chunk_len if stride == chunk_len else start + chunk_len
        end = min(full_end, duration)
        if end == full_end or end - start >= MIN_TAIL_SECONDS:
            out.append(TimeInterval(start, end))
        k += 1
    return out


def _source_of(backend) -> str:
    return getattr(backend, "source", None) or type(backend).__name__


def build_memory(source: VideoSource, segmenter: Segmenter, action_backend: ActionCaptioner,
                 scene_backend: SceneDescriber | None = None, defaults: PipelineDefaults = PipelineDefaults(),
                 mode: CaptionerMode = "ensemble", scene_captions: bool = True, max_workers: int = 1) -> CaptionLog:
    """Caption every chunk and describe the scene at every boundary.

    Backend calls may run concurrently; the log order never depends on
    completion order. Any backend failure aborts with a :class:`PipelineError`
    that reports how many action chunks had completed.
    """
    if mode not in ("ensemble", "hybrid"):
        raise ArgumentError(f"unknown captioner mode {mode!r}")
    if mode == "ensemble" and scene_captions and scene_backend is None:
        raise ArgumentError("ensemble mode needs a scene backend")
    duration = source.duration
    chunks = chunk_timeline(duration, defaults.chunk_len, defaults.chunk_stride)
    if scene_captions:
        bounds = segmenter(source)
        if bounds.domain != "seconds":
            raise ArgumentError("segmenter must return boundaries in seconds")
        if bounds.values and (bounds.values[0] < 0 or bounds.values[-1] >= duration):
            raise ArgumentError(f"boundaries {bounds.values} fall outside [0, {duration})")
        boundaries = bounds.values
    else:
        boundaries = ()

    action_control = ACX if mode == "hybrid" else None

    def do_action(iv: TimeInterval) -> CaptionEntry:
        text = action_backend.caption_action(ClipRef(source.video_id, iv, duration=duration), action_control)
        return CaptionEntry(iv.start, CaptionKind.ACTION, text, _source_of(action_backend))

    def do_scene(t: float) -> CaptionEntry:
        iv = TimeInterval(t, min(t + defaults.chunk_len, duration))
        if mode == "hybrid":
            text = action_backend.caption_action(ClipRef(source.video_id, iv, duration=duration), SCX)
            return CaptionEntry(t, CaptionKind.SCENE, text, _source_of(action_backend))
        frame = source.frame_at(t)
        media = encode_rgb8([frame]) if frame is not None else None
        text = scene_backend.describe_scene(ClipRef(source.video_id, iv, media, duration), defaults.scene_prompt)
        return CaptionEntry(t, CaptionKind.SCENE, text, _source_of(scene_backend))

    jobs = [(do_scene, t) for t in boundaries] + [(do_action, iv) for iv in chunks]
    entries: list[CaptionEntry] = []
    completed = 0
    try:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                futures = [pool.submit(fn, arg) for fn, arg in jobs]
                errors = []
                for (fn, _), fut in zip(jobs, futures):
                    exc = fut.exception()
                    if exc is None:
                        entries.append(fut.result())
                        completed += fn is do_action
                    else:
                        errors.append(exc)
                if errors:
                    raise errors[0]
        else:
            for fn, arg in jobs:
                entries.append(fn(arg))
                completed += fn is do_action
    except MemloomError as exc:
        raise PipelineError(
            f"memory build for {source.video_id} aborted after {completed}/{len(chunks)} action chunks: {exc}",
            completed_chunks=completed, cause=exc) from exc
    return CaptionLog(source.video_id, duration, tuple(entries))


# -- question answering --

QA_PROMPT_VERSION = "1"
QA_PREAMBLE = "You are given a timestamped log of a first-person video."
QA_INSTRUCTION = "Reply with the single option number."


def build_qa_prompt(log: CaptionLog, task: McqTask) -> str:
    """The one fixed Q&A prompt; there is no multi-round prompting."""
    options = "\n".join(f"{i}) {opt}" for i, opt in enumerate(task.options))
    return f"{QA_PREAMBLE}\n{render_log(log)}\nQuestion: {task.question}\nOptions:\n{options}\n{QA_INSTRUCTION}"


_DIGIT_RE = re.compile(r"\b([0-4])\b")
_LETTER_RE = re.compile(r"\b([A-Ea-e])\b")


def parse_choice(completion: str) -> int:
    """First standalone digit 0-4; failing that, first standalone letter A-E."""
    m = _DIGIT_RE.search(completion)
    if m:
        return int(m.group(1))
    m = _LETTER_RE.search(completion)
    if m:
        return "abcde".index(m.group(1).lower())
    raise AnswerParseError(completion)


def answer_question(log: CaptionLog, task: McqTask, reasoner: Reasoner,
                    max_prompt_chars: int = PipelineDefaults.max_prompt_chars) -> int:
    if not log.entries:
        raise ArgumentError("cannot answer from an empty caption log")
    prompt = build_qa_prompt(log, task)
    if len(prompt) > max_prompt_chars:
        raise PromptTooLongError(f"Q&A prompt has {len(prompt)} characters, budget is {max_prompt_chars}")
    return parse_choice(reasoner.complete(prompt))


# -- distillation dataset --


@dataclass(frozen=True)
class DistillClip:
    video_id: str
    interval: TimeInterval
    n_frames: int
    frames: Sequence[FrameRaster] | None = None


@dataclass(frozen=True)
class GroundTruthAction:
    video_id: str
    start_s: float
    end_s: float
    text: str

    @classmethod
    def from_record(cls, rec: dict) -> "GroundTruthAction":
        return cls(str(rec["video_id"]), float(rec["start_s"]), float(rec["end_s"]), str(rec["text"]))


@dataclass
class DistillResult:
    records: list[dict]
    skipped: int


def sample_index(k: int, n_frames: int, samples: int = 32) -> int:
    """Frame index of uniform sample ``k`` out of ``samples`` over ``n_frames`` frames."""
    if not (0 <= k < samples):
        raise ArgumentError(f"sample {k} not in [0, {samples})")
    # floor((k + 0.5) * N / samples) in exact integer arithmetic
    return (2 * k + 1) * n_frames // (2 * samples)


def center_frame_index(n_frames: int, samples: int = 32) -> int:
    return sample_index(samples // 2, n_frames, samples)


def sample_videos(video_ids: Sequence[str], count: int = DISTILL_VIDEO_COUNT, seed: int = 0) -> list[str]:
    """Seeded random subset of video ids, returned in input order."""
    ids = list(video_ids)
    if count >= len(ids):
        return ids
    chosen = set(random.Random(seed).sample(range(len(ids)), count))
    return [v for i, v in enumerate(ids) if i in chosen]


DISTILL_CONTROLS = (ACX.surface, SCX.surface)


def validate_record(rec: dict) -> list[str]:
    problems = []
    if set(rec) != {"video_id", "t", "control", "text"}:
        problems.append(f"fields {sorted(rec)} != ['control', 't', 'text', 'video_id']")
    if not isinstance(rec.get("video_id"), str) or not rec.get("video_id"):
        problems.append("video_id must be a non-empty string")
    t = rec.get("t")
    if not isinstance(t, (int, float)) or isinstance(t, bool) or not math.isfinite(t) or t < 0:
        problems.append("t must be a finite non-negative number")
    if rec.get("control") not in DISTILL_CONTROLS:
        problems.append(f"control must be one of {DISTILL_CONTROLS}")
    if not isinstance(rec.get("text"), str) or not rec.get("text", "").strip():
        problems.append("text must be a non-empty string")
    return problems


def build_distillation_dataset(clips: Sequence[DistillClip], scene_backend: SceneDescriber,
                               gt_actions: Sequence[GroundTruthAction],
                               defaults: PipelineDefaults = PipelineDefaults()) -> DistillResult:
    """Pair teacher scene captions with ``[SCX]`` and ground-truth actions with ``[ACX]``.

    Each clip contributes one scene record, described from the center of
    ``defaults.distill_sample_frames`` uniformly sampled frames. Clips whose
    frame is unavailable are skipped and counted.
    """
    samples = defaults.distill_sample_frames
    records = []
    skipped = 0
    for clip in clips:
        if clip.n_frames < 1:
            skipped += 1
            continue
        idx = center_frame_index(clip.n_frames, samples)
        media = None
        if clip.frames is not None:
            if idx >= len(clip.frames):
                skipped += 1
                continue
            media = encode_rgb8([clip.frames[idx]])
        t = clip.interval.start + idx * clip.interval.length / clip.n_frames
        frame_ref = ClipRef(clip.video_id, TimeInterval(t, t + clip.interval.length / clip.n_frames), media)
        text = scene_backend.describe_scene(frame_ref, defaults.scene_prompt)
        records.append({"video_id": clip.video_id, "t": t, "control": SCX.surface, "text": text.strip()})
    if clips and skipped == len(clips):
        raise PipelineError(f"all {len(clips)} clips were skipped for missing media")
    if skipped:
        logger.warning("skipped %d of %d clips for missing media", skipped, len(clips))
    for gt in gt_actions:
        records.append({"video_id": gt.video_id, "t": float(gt.start_s), "control": ACX.surface, "text": gt.text.strip()})
    records.sort(key=lambda r: (r["video_id"], r["t"], r["control"] != SCX.surface, r["text"]))
    return DistillResult(records, skipped)
