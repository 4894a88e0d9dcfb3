"""Seeded synthetic fixtures for offline runs.

All randomness comes from numpy's PCG64 bit generator seeded with the
caller's integer seed, so fixtures are reproducible from the seed alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from memloom.backends import MockTranscript
from memloom.errors import ArgumentError
from memloom.memory import McqTask, format_timestamp
from memloom.pipeline import chunk_timeline
from memloom.segmentation import BoundarySet, FeatureSequence, FrameRaster


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_feature_stream(seed: int, n: int, dim: int, boundaries: Sequence[int], noise_sigma: float,
                       fps: float = 1.0, min_separation: float = 0.5) -> tuple[FeatureSequence, BoundarySet]:
    """Piecewise-constant unit-norm segment means plus Gaussian noise.

    Segment means are pairwise at least ``min_separation`` apart in L2.
    """
    bounds = tuple(int(b) for b in boundaries)
    if dim < 1 or n < 1:
        raise ArgumentError("n and dim must be >= 1")
    if noise_sigma < 0:
        raise ArgumentError("noise_sigma must be >= 0")
    if any(b <= 0 or b >= n for b in bounds) or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ArgumentError(f"boundaries must be strictly increasing inside (0, {n}): {bounds}")
    rng = _rng(seed)
    means: list[np.ndarray] = []
    for _ in range(len(bounds) + 1):
        for _attempt in range(10_000):
            v = rng.standard_normal(dim)
            norm = np.linalg.norm(v)
            if norm == 0:
                continue
            v = v / norm
            if all(np.linalg.norm(v - m) >= min_separation for m in means):
                break
        else:
            raise ArgumentError(f"cannot place {len(bounds) + 1} unit means {min_separation} apart in {dim} dims")
        means.append(v)
    labels = np.searchsorted(np.asarray(bounds, dtype=np.int64), np.arange(n), side="right")
    data = np.stack(means)[labels]
    if noise_sigma > 0:
        data = data + noise_sigma * rng.standard_normal((n, dim))
    return FeatureSequence(data, fps), BoundarySet(bounds, "frames", n)


def gen_frame_stream(seed: int, run_lengths: Sequence[int], width: int = 8, height: int = 6,
                     min_color_gap: int = 60) -> tuple[list[FrameRaster], BoundarySet]:
    """Solid-color frame runs; the planted cuts are the first frame of every run after the first."""
    if not run_lengths or any(r < 1 for r in run_lengths):
        raise ArgumentError("run lengths must be positive")
    rng = _rng(seed)
    colors: list[np.ndarray] = []
    for _ in run_lengths:
        while True:
            c = rng.integers(0, 256, size=3)
            if not colors or np.abs(c - colors[-1]).mean() >= min_color_gap:
                break
        colors.append(c)
    frames = []
    for c, r in zip(colors, run_lengths):
        frames.extend([FrameRaster.solid(width, height, tuple(int(x) for x in c))] * r)
    cuts = tuple(itertools.accumulate(run_lengths))[:-1]
    return frames, BoundarySet(cuts, "frames", len(frames))


_VERBS = ("opens", "closes", "lifts", "rinses", "cuts", "stirs", "folds", "wipes", "moves", "checks",
          "pours", "drops", "grabs", "places", "turns")
_ADJS = ("red", "blue", "small", "large", "wooden", "metal", "green", "white", "old", "clean")
_NOUNS = ("drawer", "cup", "knife", "bowl", "towel", "pan", "lid", "bottle", "board", "box",
          "spoon", "plate", "jar", "brush", "bag")
_ROOMS = ("kitchen", "garage", "workshop", "living room", "garden", "office", "laundry room", "hallway")
_SURFACES = ("counter", "table", "shelf", "floor", "bench", "desk")


@dataclass
class MockWorld:
    video_id: str
    duration: float
    chunk_len: float
    boundaries: tuple[float, ...]
    transcript: MockTranscript
    tasks: list[McqTask] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration": self.duration,
            "chunk_len": self.chunk_len,
            "boundaries": list(self.boundaries),
            "transcript": self.transcript.to_dict(),
            "tasks": [t.to_record() for t in self.tasks],
        }

    @property
    def answers(self) -> dict[str, int]:
        """Question text -> gold index, the configuration an oracle reasoner needs."""
        return {t.question: t.gold for t in self.tasks}


def gen_mock_world(seed: int, duration: float, chunk_len: float, boundaries: Sequence[float],
                   video_id: str = "synth-000") -> MockWorld:
    """Scripted captions for every chunk and boundary, plus one five-option task per caption.

    Every gold option is a caption that appears verbatim in the rendered log;
    no distractor appears anywhere in it.
    """
    chunks = chunk_timeline(duration, chunk_len)
    bounds = tuple(float(b) for b in boundaries)
    if any(b < 0 or b >= duration for b in bounds) or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ArgumentError(f"boundaries must be strictly increasing inside [0, {duration}): {bounds}")
    rng = _rng(seed)

    action_pool = [f"{v} the {a} {n}" for v in _VERBS for a in _ADJS for n in _NOUNS]
    scene_pool = [f"a {room} with a {a} {n} on the {s}" for room in _ROOMS for a in _ADJS for n in _NOUNS
                  for s in _SURFACES]
    action_order = rng.permutation(len(action_pool))
    scene_order = rng.permutation(len(scene_pool))
    need_a = len(chunks) * 5
    need_s = len(bounds) * 5
    if need_a > len(action_pool) or need_s > len(scene_pool):
        raise ArgumentError("video too long for the synthetic caption vocabulary")
    actions = [action_pool[i] for i in action_order[:len(chunks)]]
    action_distractors = [action_pool[i] for i in action_order[len(chunks):need_a]]
    scenes = [scene_pool[i] for i in scene_order[:len(bounds)]]
    scene_distractors = [scene_pool[i] for i in scene_order[len(bounds):need_s]]

    transcript = MockTranscript(
        actions={(video_id, round(iv.start, 6)): text for iv, text in zip(chunks, actions)},
        scenes={(video_id, round(t, 6)): text for t, text in zip(bounds, scenes)},
    )

    tasks = []

    def add_task(question: str, answer: str, distractors: list[str]) -> None:
        gold = int(rng.integers(0, 5))
        options = list(distractors)
        options.insert(gold, answer)
        tasks.append(McqTask(question, tuple(options), gold, f"{video_id}-q{len(tasks):03d}"))

    for k, (t, text) in enumerate(zip(bounds, scenes)):
        add_task(f"What did the scene look like at t={format_timestamp(t)}?", text, scene_distractors[4 * k:4 * k + 4])
    for k, (iv, text) in enumerate(zip(chunks, actions)):
        add_task(f"What happened at t={format_timestamp(iv.start)}?", text, action_distractors[4 * k:4 * k + 4])
    return MockWorld(video_id, float(duration), float(chunk_len), bounds, transcript, tasks)
