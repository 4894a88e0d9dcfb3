"""On-disk formats: feature sequences, frame streams, JSONL records, atomic writes.

Binary layouts are little-endian:

``FSEQ``: ``b"FSEQ"``, u32 n, u32 dim, f32 fps, then ``n*dim`` f32 values row-major.

``RGB8``: ``b"RGB8"``, u32 width, u32 height, u32 count, then ``count`` packed
``height*width*3`` byte frames.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from memloom.errors import FormatError
from memloom.segmentation import FeatureSequence, FrameRaster

_FSEQ_HEADER = struct.Struct("<4sIIf")
_RGB8_HEADER = struct.Struct("<4sIII")


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# -- feature sequences --


def encode_fseq(seq: FeatureSequence) -> bytes:
    body = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    return _FSEQ_HEADER.pack(b"FSEQ", seq.n, seq.dim, seq.fps) + body


def decode_fseq(buf: bytes) -> FeatureSequence:
    if len(buf) < _FSEQ_HEADER.size:
        raise FormatError("FSEQ file shorter than its header")
    magic, n, dim, fps = _FSEQ_HEADER.unpack_from(buf)
    if magic != b"FSEQ":
        raise FormatError(f"bad FSEQ magic {magic!r}")
    expected = _FSEQ_HEADER.size + 4 * n * dim
    if len(buf) != expected:
        raise FormatError(f"FSEQ payload is {len(buf)} bytes, header implies {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FSEQ_HEADER.size).reshape(n, dim)
    try:
        return FeatureSequence(data.astype(np.float64), float(fps))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_fseq(path, seq: FeatureSequence) -> None:
    atomic_write(path, encode_fseq(seq))


def read_fseq(path) -> FeatureSequence:
    return decode_fseq(Path(path).read_bytes())


def read_feature_csv(path, meta_path=None) -> FeatureSequence:
    """One frame per CSV row; fps comes from a JSON sidecar (``<path>.meta.json`` by default)."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else path.with_name(path.name + ".meta.json")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        fps = float(meta["fps"])
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar metadata {meta_path}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad sidecar metadata {meta_path}: {exc}") from exc
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        seq = FeatureSequence(data, fps)
    except ValueError as exc:
        raise FormatError(f"malformed feature CSV {path}: {exc}") from exc
    if "dim" in meta and int(meta["dim"]) != seq.dim:
        raise FormatError(f"CSV has {seq.dim} columns, sidecar says {meta['dim']}")
    return seq


def write_feature_csv(path, seq: FeatureSequence) -> None:
    path = Path(path)
    lines = [",".join(repr(float(v)) for v in row) for row in seq.data]
    atomic_write(path, "\n".join(lines) + "\n")
    atomic_write(path.with_name(path.name + ".meta.json"), json.dumps({"fps": seq.fps, "n": seq.n, "dim": seq.dim}))


def read_features(path) -> FeatureSequence:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_feature_csv(path)
    return read_fseq(path)


# -- frame streams --


def encode_rgb8(frames: Sequence[FrameRaster]) -> bytes:
    if not frames:
        raise FormatError("cannot encode an empty frame stream")
    h, w = frames[0].height, frames[0].width
    parts = [_RGB8_HEADER.pack(b"RGB8", w, h, len(frames))]
    for f in frames:
        if (f.height, f.width) != (h, w):
            raise FormatError("all frames in a stream must share dimensions")
        parts.append(f.pixels.tobytes())
    return b"".join(parts)


def decode_rgb8(buf: bytes) -> list[FrameRaster]:
    if len(buf) < _RGB8_HEADER.size:
        raise FormatError("RGB8 file shorter than its header")
    magic, w, h, count = _RGB8_HEADER.unpack_from(buf)
    if magic != b"RGB8":
        raise FormatError(f"bad RGB8 magic {magic!r}")
    if w < 1 or h < 1:
        raise FormatError(f"bad RGB8 frame size {w}x{h}")
    frame_bytes = w * h * 3
    if len(buf) != _RGB8_HEADER.size + count * frame_bytes:
        raise FormatError("RGB8 payload size does not match header")
    arr = np.frombuffer(buf, dtype=np.uint8, offset=_RGB8_HEADER.size).reshape(count, h, w, 3)
    return [FrameRaster(arr[i].copy()) for i in range(count)]


def write_rgb8(path, frames: Sequence[FrameRaster]) -> None:
    atomic_write(path, encode_rgb8(frames))


def read_rgb8(path) -> list[FrameRaster]:
    return decode_rgb8(Path(path).read_bytes())


# -- JSONL --


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            out.append(rec)
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    atomic_write(path, dumps_jsonl(records))
