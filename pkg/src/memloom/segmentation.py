"""Scene-change boundary detection.

Three strategies decide where the memory gets a scene description:

* ``segment_uniform``: a fixed cadence, every ``interval`` seconds.
* ``content_score`` + ``detect_content_cuts``: thresholded mean absolute
  pixel difference between adjacent frames.
* ``kts_segment``: kernel temporal segmentation, an exact dynamic program
  over per-frame feature vectors with a penalty on the number of segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from memloom.errors import ArgumentError, OutOfRangeError

Domain = Literal["frames", "seconds"]


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame feature vectors, ``data`` has shape ``(n, dim)``."""

    data: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ArgumentError(f"features must be a non-empty (n, dim) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("features contain non-finite values")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ArgumentError(f"fps must be positive, got {self.fps}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n / self.fps


@dataclass(frozen=True)
class FrameRaster:
    """An 8-bit RGB frame, ``pixels`` has shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ArgumentError(f"frame must have shape (height, width, 3), got {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ArgumentError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameRaster):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def solid(cls, width: int, height: int, rgb: tuple[int, int, int]) -> "FrameRaster":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = rgb
        return cls(px)


@dataclass(frozen=True)
class BoundarySet:
    """Strictly increasing scene-change positions, in frames or seconds."""

    values: tuple
    domain: Domain = "frames"
    limit: float | None = None

    def __post_init__(self):
        vals = tuple(int(v) if self.domain == "frames" else float(v) for v in self.values)
        if self.domain not in ("frames", "seconds"):
            raise ArgumentError(f"unknown boundary domain {self.domain!r}")
        for a, b in zip(vals, vals[1:]):
            if not b > a:
                raise ArgumentError(f"boundaries must be strictly increasing: {vals}")
        if vals and vals[0] < 0:
            raise OutOfRangeError(f"boundary {vals[0]} is negative")
        if vals and self.limit is not None and vals[-1] >= self.limit:
            raise OutOfRangeError(f"boundary {vals[-1]} is not below {self.limit}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


# -- uniform --


def segment_uniform(duration: float, interval: float) -> BoundarySet:
    """Boundaries at ``0, interval, 2*interval, ...`` strictly below ``duration``."""
    if not (duration > 0 and interval > 0):
        raise ArgumentError(f"duration and interval must be positive, got {duration}, {interval}")
    count = math.ceil(duration / interval)
    # Multiply rather than accumulate so k*interval carries no drift.
    values = [k * interval for k in range(count + 1)]
    return BoundarySet(tuple(v for v in values if v < duration), "seconds", duration)


# -- content detector --

DEFAULT_CONTENT_WEIGHTS = (1.0, 1.0, 1.0)
DEFAULT_CONTENT_THRESHOLD = 27.0
DEFAULT_MIN_SCENE_LEN = 15


def content_score(prev: FrameRaster, cur: FrameRaster, weights: Sequence[float] = DEFAULT_CONTENT_WEIGHTS) -> float:
    """Weighted mean of the per-channel mean absolute pixel differences."""
    if prev.pixels.shape != cur.pixels.shape:
        raise ArgumentError(f"frame size mismatch: {prev.pixels.shape} vs {cur.pixels.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or not np.any(w > 0):
        raise ArgumentError(f"weights must be 3 non-negative values, not all zero; got {weights}")
    diff = np.abs(cur.pixels.astype(np.int16) - prev.pixels.astype(np.int16))
    mad = diff.reshape(-1, 3).mean(axis=0)
    return float(np.dot(w, mad) / w.sum())


def content_scores(frames: Sequence[FrameRaster], weights: Sequence[float] = DEFAULT_CONTENT_WEIGHTS) -> list[float]:
    """Scores between each pair of adjacent frames; ``len(frames) - 1`` values."""
    return [content_score(a, b, weights) for a, b in zip(frames, frames[1:])]


def detect_content_cuts(scores: Sequence[float], threshold: float = DEFAULT_CONTENT_THRESHOLD,
                        min_scene_len: int = DEFAULT_MIN_SCENE_LEN) -> BoundarySet:
    """Emit a cut at frame ``i + 1`` whenever ``scores[i] >= threshold``.

    A crossing closer than ``min_scene_len`` frames to the previous emitted
    cut is suppressed. The first crossing is never suppressed.
    """
    if not threshold > 0:
        raise ArgumentError(f"threshold must be positive, got {threshold}")
    if min_scene_len < 1:
        raise ArgumentError(f"min_scene_len must be >= 1, got {min_scene_len}")
    cuts: list[int] = []
    for i, s in enumerate(scores):
        frame = i + 1
        if s >= threshold and (not cuts or frame - cuts[-1] >= min_scene_len):
            cuts.append(frame)
    return BoundarySet(tuple(cuts), "frames", len(scores) + 1)


# -- kernel temporal segmentation --


def linear_kernel(features: FeatureSequence | np.ndarray, normalize: bool = True) -> np.ndarray:
    x = features.data if isinstance(features, FeatureSequence) else np.asarray(features, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    return x @ x.T


def kts_scatter(K: np.ndarray, a: int, b: int) -> float:
    """Within-segment kernel scatter of frames ``a..b`` inclusive."""
    n = K.shape[0]
    if not (0 <= a <= b < n):
        raise OutOfRangeError(f"segment [{a}, {b}] not within [0, {n})")
    block = K[a:b + 1, a:b + 1]
    return float(np.trace(block) - block.sum() / (b - a + 1))


def scatter_matrix(K: np.ndarray) -> np.ndarray:
    """``J[a, b]`` = scatter of frames ``a..b`` for every ``a <= b`` (zero below the diagonal)."""
    n = K.shape[0]
    diag = np.concatenate(([0.0], np.cumsum(np.diag(K))))
    S = np.zeros((n + 1, n + 1))
    S[1:, 1:] = np.cumsum(np.cumsum(K, axis=0), axis=1)
    a = np.arange(n)[:, None]
    b = np.arange(n)[None, :]
    hi = b + 1
    block_sum = S[hi, hi] - S[a, hi] - S[hi, a] + S[a, a]
    length = np.maximum(b - a + 1, 1)
    J = (diag[hi] - diag[a]) - block_sum / length
    J[b < a] = 0.0
    return J


def kts_penalty(n: int, m: int, weight: float) -> float:
    return weight * m * (math.log(n / m) + 1.0)


@dataclass(frozen=True)
class KtsResult:
    boundaries: BoundarySet
    segments: int
    scatter: float
    objective: float
    costs: tuple[float, ...]  # optimal total scatter for 1..max_segments segments


def kts_dp(J: np.ndarray, max_segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact prefix dynamic program over a scatter matrix.

    Returns ``(L, back)`` where ``L[m, t]`` is the least total scatter of
    frames ``0..t-1`` split into ``m`` segments and ``back[m, t]`` is the start
    of the last segment in that optimum (lowest index on ties).
    """
    n = J.shape[0]
    L = np.full((max_segments + 1, n + 1), np.inf)
    back = np.zeros((max_segments + 1, n + 1), dtype=np.int64)
    L[1, 1:] = J[0, :]
    for m in range(2, max_segments + 1):
        for t in range(m, n + 1):
            s = np.arange(m - 1, t)
            cand = L[m - 1, s] + J[s, t - 1]
            k = int(np.argmin(cand))
            L[m, t] = cand[k]
            back[m, t] = s[k]
    return L, back


def _backtrack(back: np.ndarray, m: int, n: int) -> tuple[int, ...]:
    cps = []
    t = n
    for k in range(m, 1, -1):
        t = int(back[k, t])
        cps.append(t)
    return tuple(reversed(cps))


def kts_fit(features: FeatureSequence, max_segments: int = 32, penalty_weight: float = 1.0,
            fixed_segments: int | None = None) -> KtsResult:
    """Kernel temporal segmentation with a linear kernel on L2-normalized features.

    For every segment count ``m`` up to ``max_segments`` the exact optimum is
    computed; the chosen ``m`` minimizes
    ``scatter + penalty_weight * m * (log(n / m) + 1)``. Pass
    ``fixed_segments`` to skip model selection.
    """
    if not isinstance(features, FeatureSequence):
        raise ArgumentError("kts_fit expects a FeatureSequence")
    if max_segments < 1:
        raise ArgumentError(f"max_segments must be >= 1, got {max_segments}")
    if penalty_weight < 0:
        raise ArgumentError(f"penalty_weight must be >= 0, got {penalty_weight}")
    n = features.n
    max_segments = min(max_segments, n)
    if fixed_segments is not None:
        if not 1 <= fixed_segments <= n:
            raise ArgumentError(f"fixed_segments must lie in [1, {n}], got {fixed_segments}")
        max_segments = fixed_segments

    J = scatter_matrix(linear_kernel(features))
    L, back = kts_dp(J, max_segments)
    costs = tuple(float(L[m, n]) for m in range(1, max_segments + 1))
    if fixed_segments is not None:
        best = fixed_segments
    else:
        objectives = [c + kts_penalty(n, m, penalty_weight) for m, c in enumerate(costs, start=1)]
        best = int(np.argmin(objectives)) + 1
    scatter = costs[best - 1]
    return KtsResult(
        boundaries=BoundarySet(_backtrack(back, best, n), "frames", n),
        segments=best,
        scatter=scatter,
        objective=scatter + kts_penalty(n, best, penalty_weight),
        costs=costs,
    )


def kts_segment(features: FeatureSequence, max_segments: int = 32, penalty_weight: float = 1.0) -> BoundarySet:
    """Change points (start frames of segments 2..m) of the penalized KTS optimum."""
    return kts_fit(features, max_segments, penalty_weight).boundaries


def boundaries_to_seconds(b: BoundarySet, fps: float) -> BoundarySet:
    if not fps > 0:
        raise ArgumentError(f"fps must be positive, got {fps}")
    if b.domain != "frames":
        raise ArgumentError("boundaries are already in seconds")
    limit = None if b.limit is None else b.limit / fps
    return BoundarySet(tuple(v / fps for v in b.values), "seconds", limit)
