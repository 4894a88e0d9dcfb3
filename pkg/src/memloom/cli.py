"""Command-line entry point: ``memloom <command> [options]``.

Settings resolve in the order flags > environment > ``--config`` file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Mapping

from memloom import io as mio
from memloom.backends import (
    AUTH_ENV_VAR,
    ENV_VARS,
    BackendClient,
    BackendEndpoint,
    LogLookupReasoner,
    MockActionCaptioner,
    MockEmbedder,
    MockSceneDescriber,
    MockServer,
    MockTranscript,
    OracleReasoner,
    ScriptedReasoner,
)
from memloom.errors import ConfigurationError, FormatError, MemloomError
from memloom.memory import CaptionKind, McqTask, PipelineDefaults, TimeInterval, log_from_jsonl, log_to_jsonl, render_log
from memloom.metrics import grouped_report, mcq_accuracy
from memloom.pipeline import (
    DistillClip,
    GroundTruthAction,
    VideoSource,
    answer_question,
    build_distillation_dataset,
    build_memory,
    content_segmenter,
    kts_segmenter,
    no_scene_segmenter,
    uniform_segmenter,
    validate_record,
)
from memloom.segmentation import (
    DEFAULT_CONTENT_THRESHOLD,
    DEFAULT_MIN_SCENE_LEN,
    boundaries_to_seconds,
    content_scores,
    detect_content_cuts,
    kts_segment,
    segment_uniform,
)
from memloom.synth import gen_feature_stream, gen_frame_stream, gen_mock_world

logger = logging.getLogger("memloom")

MOCK_URL = "http://mock.memloom.invalid"
SEG_METHODS = ("uniform", "content", "kts")


# -- configuration --


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a JSON object")
    base = Path(path).parent
    cfg["_base"] = str(base)
    return cfg


def _pick(flag, cfg: Mapping, key: str, default=None):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _path_opt(flag: str | None, cfg: Mapping, section: Mapping, key: str) -> str | None:
    """Flag paths are taken as given; config-file paths are relative to the config file."""
    if flag is not None:
        return flag
    return _resolve_path(cfg, section.get(key))


def _resolve_path(cfg: Mapping, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute() and cfg.get("_base"):
        p = Path(cfg["_base"]) / p
    return str(p)


class Backends:
    """The four role clients, either real HTTP endpoints or a shared in-process mock server."""

    def __init__(self, cfg: Mapping, args: argparse.Namespace, tasks: list[McqTask] | None = None,
                 environ: Mapping[str, str] | None = None):
        environ = os.environ if environ is None else environ
        self.mock = bool(_pick(getattr(args, "mock", None) or None, cfg, "mock", False))
        self.server: MockServer | None = None
        if self.mock:
            transcript = MockTranscript()
            tpath = _path_opt(getattr(args, "transcript", None), cfg, cfg, "mock_transcript")
            if tpath:
                data = json.loads(Path(tpath).read_text(encoding="utf-8"))
                transcript = MockTranscript.from_dict(data.get("transcript", data))
            hybrid = _pick(getattr(args, "captioner_mode", None), cfg, "captioner_mode", "ensemble") == "hybrid"
            kind = _pick(getattr(args, "mock_reasoner", None), cfg, "mock_reasoner", "lookup")
            if kind == "oracle":
                reasoner = OracleReasoner({t.question: t.gold for t in tasks or [] if t.gold is not None})
            elif kind == "adversarial":
                reasoner = ScriptedReasoner(_pick(getattr(args, "adversarial_reply", None), cfg, "adversarial_reply",
                                                  "I think option three."))
            elif kind == "lookup":
                reasoner = LogLookupReasoner()
            else:
                raise ConfigurationError(f"unknown mock reasoner {kind!r}")
            self.server = MockServer(MockActionCaptioner(transcript, hybrid=hybrid), MockSceneDescriber(transcript),
                                     reasoner, MockEmbedder())
        self._cfg = cfg
        self._args = args
        self._environ = environ
        self._clients: dict[str, BackendClient] = {}

    def client(self, role: str) -> BackendClient:
        if role in self._clients:
            return self._clients[role]
        if self.server is not None:
            c = BackendClient(BackendEndpoint(MOCK_URL, max_retries=0), transport=self.server.transport())
            c.source = "mock"
        else:
            ep_cfg = dict(self._cfg.get("endpoints", {}).get(role, {}))
            flag_url = getattr(self._args, f"{role}_url", None)
            url = flag_url or self._environ.get(ENV_VARS[role]) or ep_cfg.pop("base_url", None)
            ep_cfg.pop("base_url", None)
            if not url:
                raise ConfigurationError(f"no URL configured for the {role} backend; set {ENV_VARS[role]} "
                                         f"or endpoints.{role}.base_url in the config file")
            token = self._environ.get(AUTH_ENV_VAR) or ep_cfg.pop("auth_token", None)
            ep_cfg.pop("auth_token", None)
            c = BackendClient(BackendEndpoint(url, auth_token=token, **ep_cfg))
        self._clients[role] = c
        return c

    def close(self) -> None:
        for c in self._clients.values():
            c.close()


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands --


def cmd_segment(args, cfg) -> int:
    method = args.method
    params: dict[str, Any] = {}
    if method == "uniform":
        duration = args.duration
        if duration is None and args.input:
            duration = mio.read_features(args.input).duration
        if duration is None:
            raise ConfigurationError("uniform segmentation needs --duration or --input")
        params = {"duration": duration, "interval": args.interval}
        seconds = segment_uniform(duration, args.interval)
    elif method == "kts":
        if not args.input:
            raise ConfigurationError("kts segmentation needs --input features")
        feats = mio.read_features(args.input)
        params = {"max_segments": args.max_segments, "penalty_weight": args.penalty, "fps": feats.fps}
        seconds = boundaries_to_seconds(kts_segment(feats, args.max_segments, args.penalty), feats.fps)
    else:
        if not args.input:
            raise ConfigurationError("content segmentation needs --input frames (RGB8)")
        frames = mio.read_rgb8(args.input)
        params = {"threshold": args.threshold, "min_scene_len": args.min_scene_len, "fps": args.fps}
        cuts = detect_content_cuts(content_scores(frames), args.threshold, args.min_scene_len)
        seconds = boundaries_to_seconds(cuts, args.fps)
    result = {"method": method, "params": params, "boundaries_s": list(seconds.values)}
    if args.output:
        mio.atomic_write(args.output, json.dumps(result, indent=2, sort_keys=True) + "\n")
    else:
        _emit(result)
    print(f"{len(seconds)} boundaries ({method})", file=sys.stderr)
    return 0


def _video_source(args, cfg) -> VideoSource:
    vcfg = dict(cfg.get("video", {}))
    video_id = _pick(args.video_id, vcfg, "video_id", "video")
    feats_path = _path_opt(args.features, cfg, vcfg, "features")
    frames_path = _path_opt(args.frames, cfg, vcfg, "frames")
    features = mio.read_features(feats_path) if feats_path else None
    frames = mio.read_rgb8(frames_path) if frames_path else None
    frames_fps = _pick(args.frames_fps, vcfg, "frames_fps", 1.0 if frames else None)
    duration = _pick(args.duration, vcfg, "duration")
    if duration is None:
        if features is not None:
            duration = features.duration
        elif frames is not None:
            duration = len(frames) / frames_fps
        else:
            raise ConfigurationError("video duration unknown; pass --duration or set video.duration")
    return VideoSource(str(video_id), float(duration), features, frames, frames_fps)


def _segmenter(args, cfg):
    scfg = dict(cfg.get("segmentation", {}))
    method = _pick(args.segmentation, scfg, "method", "uniform")
    if method == "uniform":
        return uniform_segmenter(float(_pick(args.interval, scfg, "interval", PipelineDefaults.uniform_interval)))
    if method == "kts":
        return kts_segmenter(int(scfg.get("max_segments", 32)), float(scfg.get("penalty_weight", 1.0)))
    if method == "content":
        return content_segmenter(float(scfg.get("threshold", DEFAULT_CONTENT_THRESHOLD)),
                                 int(scfg.get("min_scene_len", DEFAULT_MIN_SCENE_LEN)))
    if method == "none":
        return no_scene_segmenter
    raise ConfigurationError(f"unknown segmentation method {method!r}")


def cmd_build_memory(args, cfg) -> int:
    source = _video_source(args, cfg)
    scene_flag = None if args.scene_captions is None else args.scene_captions == "on"
    scene_captions = bool(_pick(scene_flag, cfg, "scene_captions", True))
    mode = _pick(args.captioner_mode, cfg, "captioner_mode", "ensemble")
    defaults = PipelineDefaults(chunk_len=float(_pick(args.chunk_len, cfg, "chunk_len", PipelineDefaults.chunk_len)))
    backends = Backends(cfg, args)
    try:
        scene = backends.client("scene") if scene_captions and mode == "ensemble" else None
        log = build_memory(source, _segmenter(args, cfg), backends.client("caption"), scene, defaults,
                           mode=mode, scene_captions=scene_captions,
                           max_workers=int(_pick(args.max_workers, cfg, "max_workers", 1)))
    finally:
        backends.close()
    output = _pick(args.output, cfg, "output")
    if not output:
        raise ConfigurationError("build-memory needs --output")
    mio.atomic_write(output, log_to_jsonl(log))
    if args.render:
        mio.atomic_write(args.render, render_log(log) + "\n")
    _emit({"video_id": log.video_id, "entries": len(log), "action": log.count(CaptionKind.ACTION), "scene": log.count(CaptionKind.SCENE),
           "output": output})
    return 0


def _read_tasks(path) -> list[McqTask]:
    tasks = []
    for i, rec in enumerate(mio.read_jsonl(path), start=1):
        try:
            tasks.append(McqTask.from_record(rec))
        except (FormatError, ValueError) as exc:
            raise FormatError(f"{path}: task {i} fails schema validation: {exc}") from exc
    return tasks


def cmd_ask(args, cfg) -> int:
    log = log_from_jsonl(Path(args.log).read_text(encoding="utf-8"))
    tasks = _read_tasks(args.tasks)
    backends = Backends(cfg, args, tasks=tasks)
    records = []
    try:
        reasoner = backends.client("llm")
        budget = int(cfg.get("max_prompt_chars", PipelineDefaults.max_prompt_chars))
        for t in tasks:
            rec: dict[str, Any] = {"id": t.task_id}
            try:
                pred = answer_question(log, t, reasoner, budget)
            except MemloomError as exc:
                rec.update(error=type(exc).__name__, raw=getattr(exc, "raw", str(exc)))
            else:
                rec["prediction"] = pred
                if t.gold is not None:
                    rec["gold"] = t.gold
                    rec["correct"] = pred == t.gold
            records.append(rec)
    finally:
        backends.close()
    if args.output:
        mio.write_jsonl(args.output, records)
    errors = sum(1 for r in records if "error" in r)
    graded = [(r, t.gold) for r, t in zip(records, tasks) if t.gold is not None]
    parsed = [(r, g) for r, g in graded if "error" not in r]
    summary: dict[str, Any] = {"tasks": len(tasks), "answered": len(tasks) - errors, "errors": errors}
    if graded:
        summary["accuracy"] = mcq_accuracy([r.get("prediction", -1) for r, _ in graded], [g for _, g in graded])
    if parsed:
        summary["accuracy_parsed"] = mcq_accuracy([r["prediction"] for r, _ in parsed], [g for _, g in parsed])
    _emit(summary)
    return 0 if errors == 0 else 1


def _read_captions(path) -> list[dict]:
    p = Path(path)
    if p.suffix.lower() == ".jsonl":
        recs = mio.read_jsonl(p)
        for i, r in enumerate(recs, start=1):
            if not isinstance(r.get("text"), str):
                raise FormatError(f"{path}:{i}: caption record needs a 'text' string")
        return recs
    return [{"text": ln} for ln in p.read_text(encoding="utf-8").splitlines()]


def cmd_eval_captions(args, cfg) -> int:
    hyps, refs = _read_captions(args.hyp), _read_captions(args.ref)
    if len(hyps) != len(refs):
        raise FormatError(f"hypothesis file has {len(hyps)} captions, reference file has {len(refs)}")
    if not hyps:
        raise FormatError("no captions to evaluate")
    triples = [(r.get("kind") or h.get("kind") or "all", h["text"], r["text"]) for h, r in zip(hyps, refs)]
    backends = Backends(cfg, args)
    try:
        embedder = backends.client("embed")
        report = grouped_report(triples, embedder)
    finally:
        backends.close()
    report.pop("all", None)
    if args.output:
        mio.atomic_write(args.output, json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    return 0


def _read_clips(cfg, path) -> list[DistillClip]:
    recs = mio.read_jsonl(path) if path else cfg.get("clips", [])
    clips = []
    for i, r in enumerate(recs, start=1):
        try:
            frames = mio.read_rgb8(_resolve_path(cfg, r["frames"])) if r.get("frames") else None
            clips.append(DistillClip(str(r["video_id"]), TimeInterval(float(r["start_s"]), float(r["end_s"])),
                                     int(r.get("n_frames", len(frames) if frames else 0)), frames))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"clip record {i} is malformed: {exc}") from exc
    return clips


def cmd_distill(args, cfg) -> int:
    clips = _read_clips(cfg, args.clips)
    gt_path = _path_opt(args.gt_actions, cfg, cfg, "gt_actions")
    try:
        gt = [GroundTruthAction.from_record(r) for r in (mio.read_jsonl(gt_path) if gt_path else [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed ground-truth action record: {exc}") from exc
    if not clips:
        raise ConfigurationError("no clips to distill")
    backends = Backends(cfg, args)
    try:
        result = build_distillation_dataset(clips, backends.client("scene"), gt)
    finally:
        backends.close()
    violations = sum(1 for r in result.records if validate_record(r))
    if violations:
        raise FormatError(f"{violations} dataset records violate the schema")
    mio.write_jsonl(args.output, result.records)
    _emit({"records": len(result.records), "scene": sum(r["control"] == "[SCX]" for r in result.records),
           "action": sum(r["control"] == "[ACX]" for r in result.records), "skipped": result.skipped})
    return 0


def cmd_synth(args, cfg) -> int:
    out = Path(args.out_dir)
    seed = args.seed
    planted = [int(x) for x in args.planted.split(",")] if args.planted else []
    feats, bounds = gen_feature_stream(seed, args.n, args.dim, planted, args.sigma, fps=args.fps)
    mio.write_fseq(out / "features.fseq", feats)
    frames, cuts = gen_frame_stream(seed, [20, 20, 20])
    mio.write_rgb8(out / "frames.rgb8", frames)
    world_bounds = segment_uniform(args.duration, args.interval).values
    world = gen_mock_world(seed, args.duration, args.chunk_len, world_bounds, video_id=args.video_id)
    mio.atomic_write(out / "world.json", json.dumps(world.to_dict(), indent=2, sort_keys=True) + "\n")
    mio.write_jsonl(out / "tasks.jsonl", [t.to_record() for t in world.tasks])
    mio.atomic_write(out / "planted.json", json.dumps(
        {"feature_boundaries": list(bounds.values), "fps": feats.fps, "frame_cuts": list(cuts.values)},
        indent=2, sort_keys=True) + "\n")
    config = {
        "mock": True,
        "mock_transcript": "world.json",
        "video": {"video_id": args.video_id, "duration": args.duration},
        "chunk_len": args.chunk_len,
        "captioner_mode": "ensemble",
        "scene_captions": True,
        "segmentation": {"method": "uniform", "interval": args.interval},
    }
    mio.atomic_write(out / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n")
    _emit({"out_dir": str(out), "tasks": len(world.tasks), "planted": list(bounds.values)})
    return 0


# -- argument parsing --


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON config file")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    parser.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _backend_flags(p: argparse.ArgumentParser, roles) -> None:
    p.add_argument("--mock", action="store_true", default=None, help="use the in-process mock backends")
    p.add_argument("--transcript", help="mock transcript / synth world JSON")
    for role in roles:
        p.add_argument(f"--{role}-url", dest=f"{role}_url", help=f"overrides {ENV_VARS[role]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memloom", description="Caption-log memory for long-video Q&A.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="detect scene boundaries")
    _global_flags(p, suppress=True)
    p.add_argument("--method", required=True, choices=SEG_METHODS)
    p.add_argument("--input", help="features (.fseq/.csv) for kts, frames (.rgb8) for content")
    p.add_argument("--duration", type=float)
    p.add_argument("--interval", type=float, default=PipelineDefaults.uniform_interval)
    p.add_argument("--max-segments", type=int, default=32)
    p.add_argument("--penalty", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=DEFAULT_CONTENT_THRESHOLD)
    p.add_argument("--min-scene-len", type=int, default=DEFAULT_MIN_SCENE_LEN)
    p.add_argument("--fps", type=float, default=30.0, help="frame rate of the RGB8 stream")
    p.add_argument("--output")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build-memory", help="build a caption log for one video")
    _global_flags(p, suppress=True)
    _backend_flags(p, ("caption", "scene"))
    p.add_argument("--captioner-mode", choices=("ensemble", "hybrid"))
    p.add_argument("--scene-captions", choices=("on", "off"))
    p.add_argument("--segmentation", choices=SEG_METHODS + ("none",))
    p.add_argument("--interval", type=float)
    p.add_argument("--video-id")
    p.add_argument("--duration", type=float)
    p.add_argument("--features")
    p.add_argument("--frames")
    p.add_argument("--frames-fps", type=float)
    p.add_argument("--chunk-len", type=float)
    p.add_argument("--max-workers", type=int)
    p.add_argument("--output")
    p.add_argument("--render", help="also write the rendered text log here")
    p.set_defaults(func=cmd_build_memory)

    p = sub.add_parser("ask", help="answer multiple-choice tasks from a caption log")
    _global_flags(p, suppress=True)
    _backend_flags(p, ("llm",))
    p.add_argument("--log", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--output")
    p.add_argument("--mock-reasoner", choices=("lookup", "oracle", "adversarial"))
    p.add_argument("--adversarial-reply")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval-captions", help="lexical and embedding similarity of captions")
    _global_flags(p, suppress=True)
    _backend_flags(p, ("embed",))
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval_captions)

    p = sub.add_parser("distill", help="export the [ACX]/[SCX] training dataset")
    _global_flags(p, suppress=True)
    _backend_flags(p, ("scene",))
    p.add_argument("--clips", help="JSONL of {video_id, start_s, end_s, n_frames, frames?}")
    p.add_argument("--gt-actions")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("synth", help="write seeded synthetic fixtures")
    _global_flags(p, suppress=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--video-id", default="synth-000")
    p.add_argument("--duration", type=float, default=180.0)
    p.add_argument("--chunk-len", type=float, default=PipelineDefaults.chunk_len)
    p.add_argument("--interval", type=float, default=PipelineDefaults.uniform_interval)
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--planted", default="20,40")
    p.add_argument("--fps", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (MemloomError, OSError) as exc:
        print(f"memloom {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
