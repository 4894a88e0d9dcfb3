"""Clients for the four external model roles, and deterministic mocks.

Roles and wire protocol (JSON over HTTP, UTF-8):

=========  ==================  ==========================================  ===============
role       route               request                                     response
=========  ==================  ==========================================  ===============
caption    ``POST /v1/caption``   ``{video_id, start_s, end_s, control?}``    ``{text}``
scene      ``POST /v1/describe``  ``{video_id, t_s, prompt, frame_b64?}``     ``{text}``
llm        ``POST /v1/complete``  ``{prompt}``                                ``{text}``
embed      ``POST /v1/embed``     ``{texts: [...]}``                          ``{vectors}``
=========  ==================  ==========================================  ===============

:class:`MockServer` implements the same routes in-process so the HTTP
clients can be exercised end to end without a network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from memloom.errors import (
    ArgumentError,
    BackendError,
    ConfigurationError,
    FormatError,
    ProtocolError,
    RequestTooLargeError,
)
from memloom.memory import SCENE_PROMPT, CaptionKind, ControlToken, TimeInterval

logger = logging.getLogger(__name__)

ENV_VARS = {
    "caption": "MEMLOOM_CAPTION_URL",
    "scene": "MEMLOOM_SCENE_URL",
    "llm": "MEMLOOM_LLM_URL",
    "embed": "MEMLOOM_EMBED_URL",
}
AUTH_ENV_VAR = "MEMLOOM_AUTH_TOKEN"


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str
    timeout: float = 60.0
    max_retries: int = 2
    auth_token: str | None = None
    backoff_base: float = 0.5
    max_connections: int = 8
    max_request_bytes: int = 8 * 1024 * 1024

    def __post_init__(self):
        if not self.base_url:
            raise ConfigurationError("endpoint base_url is empty")
        if not self.timeout > 0:
            raise ArgumentError(f"timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ArgumentError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.backoff_base < 0:
            raise ArgumentError("backoff_base must be >= 0")
        if self.max_connections < 1:
            raise ArgumentError("max_connections must be >= 1")


def endpoint_from_env(role: str, environ: Mapping[str, str] | None = None, **overrides) -> BackendEndpoint:
    """Build the endpoint for ``role`` from ``MEMLOOM_*`` environment variables."""
    environ = os.environ if environ is None else environ
    try:
        var = ENV_VARS[role]
    except KeyError:
        raise ConfigurationError(f"unknown backend role {role!r}") from None
    url = overrides.pop("base_url", None) or environ.get(var)
    if not url:
        raise ConfigurationError(f"no URL configured for the {role} backend; set {var}")
    overrides.setdefault("auth_token", environ.get(AUTH_ENV_VAR))
    return BackendEndpoint(url, **overrides)


@dataclass(frozen=True)
class ClipRef:
    """A time slice of a video, optionally with an inline media payload (e.g. one frame)."""

    video_id: str
    interval: TimeInterval
    media: bytes | None = None
    duration: float | None = None

    def __post_init__(self):
        if self.duration is not None and self.interval.end > self.duration + 1e-9:
            raise ArgumentError(f"clip {self.interval} extends past video duration {self.duration}")

    @property
    def start(self) -> float:
        return self.interval.start


# -- role protocols --


class ActionCaptioner(Protocol):
    source: str

    def caption_action(self, clip: ClipRef, control: ControlToken | None = None) -> str: ...


class SceneDescriber(Protocol):
    source: str

    def describe_scene(self, frame: ClipRef, prompt: str = SCENE_PROMPT) -> str: ...


class Reasoner(Protocol):
    def complete(self, prompt: str) -> str: ...


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


# -- HTTP client --


def _fmt_t(t: float) -> str:
    return f"{t:g}"


def _require_text(payload: dict, endpoint: str) -> str:
    text = payload.get("text") if isinstance(payload, dict) else None
    if not isinstance(text, str) or not text.strip():
        raise ProtocolError("backend returned an empty or missing 'text' field", endpoint)
    return text.strip()


class BackendClient:
    """JSON-over-HTTP client for one endpoint; implements all four roles.

    Transport errors and 5xx responses are retried ``max_retries`` times with
    exponential backoff; 4xx responses fail immediately. Instances are
    thread-safe and can be shared.
    """

    def __init__(self, endpoint: BackendEndpoint, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.source = endpoint.base_url
        self._sleep = sleep
        headers = {"Content-Type": "application/json; charset=utf-8"}
        if endpoint.auth_token:
            headers["Authorization"] = f"Bearer {endpoint.auth_token}"
        self._http = httpx.Client(
            base_url=endpoint.base_url,
            timeout=endpoint.timeout,
            transport=transport,
            headers=headers,
            limits=httpx.Limits(max_connections=endpoint.max_connections),
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, route: str, payload: dict) -> dict:
        body = json.dumps(payload, ensure_ascii=False, sort_keys=True).encode("utf-8")
        url = self.endpoint.base_url.rstrip("/") + route
        if len(body) > self.endpoint.max_request_bytes:
            raise RequestTooLargeError(
                f"request of {len(body)} bytes exceeds limit {self.endpoint.max_request_bytes}", url, 0)
        attempts = 0
        last: str = ""
        for attempt in range(self.endpoint.max_retries + 1):
            attempts += 1
            try:
                resp = self._http.post(route, content=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError:
                        raise ProtocolError("backend response is not valid JSON", url, attempts) from None
                detail = resp.text[:200]
                if resp.status_code == 413:
                    raise RequestTooLargeError(f"backend rejected request as too large: {detail}", url, attempts, 413)
                if resp.status_code == 422:
                    raise ProtocolError(f"backend rejected request: {detail}", url, attempts, 422)
                if resp.status_code < 500:
                    raise BackendError(f"HTTP {resp.status_code} from {url}: {detail}", url, attempts, resp.status_code)
                last = f"HTTP {resp.status_code}: {detail}"
            if attempt < self.endpoint.max_retries:
                delay = self.endpoint.backoff_base * (2 ** attempt)
                logger.debug("retrying %s in %.2fs after %s", url, delay, last)
                self._sleep(delay)
        raise BackendError(f"{url} failed after {attempts} attempts ({last})", url, attempts)

    def caption_action(self, clip: ClipRef, control: ControlToken | None = None) -> str:
        payload = {"video_id": clip.video_id, "start_s": clip.interval.start, "end_s": clip.interval.end}
        if control is not None:
            payload["control"] = control.surface
        return _require_text(self.post("/v1/caption", payload), self.source)

    def describe_scene(self, frame: ClipRef, prompt: str = SCENE_PROMPT) -> str:
        payload = {"video_id": frame.video_id, "t_s": frame.interval.start, "prompt": prompt}
        if frame.media is not None:
            payload["frame_b64"] = base64.b64encode(frame.media).decode("ascii")
        return _require_text(self.post("/v1/describe", payload), self.source)

    def complete(self, prompt: str) -> str:
        payload = self.post("/v1/complete", {"prompt": prompt})
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise ProtocolError("completion response lacks a 'text' string", self.source)
        return text

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        texts = list(texts)
        if not texts:
            raise ArgumentError("embed needs at least one text")
        payload = self.post("/v1/embed", {"texts": texts})
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        return _check_vectors(vectors, len(texts), self.source)


def _check_vectors(vectors, count: int, source: str) -> list[list[float]]:
    if not isinstance(vectors, list) or len(vectors) != count:
        raise ProtocolError(f"expected {count} vectors in embed response", source)
    dims = {len(v) if isinstance(v, list) else -1 for v in vectors}
    if len(dims) != 1 or -1 in dims or 0 in dims:
        raise ProtocolError(f"embed response has inconsistent vector dimensions {sorted(dims)}", source)
    try:
        return [[float(x) for x in v] for v in vectors]
    except (TypeError, ValueError):
        raise ProtocolError("embed response contains non-numeric values", source) from None


# -- mock transcripts and mock roles --


def _key(video_id: str, t: float) -> tuple[str, float]:
    return video_id, round(float(t), 6)


@dataclass
class MockTranscript:
    """Scripted backend outputs keyed by (video_id, time)."""

    actions: dict[tuple[str, float], str] = field(default_factory=dict)
    scenes: dict[tuple[str, float], str] = field(default_factory=dict)

    def action(self, video_id: str, start: float) -> str | None:
        return self.actions.get(_key(video_id, start))

    def scene(self, video_id: str, t: float) -> str | None:
        return self.scenes.get(_key(video_id, t))

    def to_dict(self) -> dict:
        return {
            "actions": [{"video_id": v, "start_s": t, "text": s} for (v, t), s in sorted(self.actions.items())],
            "scenes": [{"video_id": v, "t_s": t, "text": s} for (v, t), s in sorted(self.scenes.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MockTranscript":
        try:
            actions = {_key(r["video_id"], r["start_s"]): r["text"] for r in data.get("actions", [])}
            scenes = {_key(r["video_id"], r["t_s"]): r["text"] for r in data.get("scenes", [])}
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed mock transcript: {exc}") from exc
        return cls(actions, scenes)


class MockActionCaptioner:
    """``"mock-action <video>@<start>"`` unless the transcript scripts the clip.

    Rejects ``[SCX]`` requests unless ``hybrid`` is set, like a plain action
    narrator would.
    """

    source = "mock"

    def __init__(self, transcript: MockTranscript | None = None, hybrid: bool = False):
        self.transcript = transcript or MockTranscript()
        self.hybrid = hybrid

    def caption_action(self, clip: ClipRef, control: ControlToken | None = None) -> str:
        if control is not None and control.kind is CaptionKind.SCENE:
            if not self.hybrid:
                raise ProtocolError("action-only captioner cannot produce scene captions", "mock")
            return self.transcript.scene(clip.video_id, clip.start) or f"mock-scene {clip.video_id}@{_fmt_t(clip.start)}"
        return self.transcript.action(clip.video_id, clip.start) or f"mock-action {clip.video_id}@{_fmt_t(clip.start)}"


class MockSceneDescriber:
    source = "mock"

    def __init__(self, transcript: MockTranscript | None = None, max_media_bytes: int | None = None):
        self.transcript = transcript or MockTranscript()
        self.max_media_bytes = max_media_bytes

    def describe_scene(self, frame: ClipRef, prompt: str = SCENE_PROMPT) -> str:
        if self.max_media_bytes is not None and frame.media is not None and len(frame.media) > self.max_media_bytes:
            raise RequestTooLargeError(f"frame payload of {len(frame.media)} bytes exceeds {self.max_media_bytes}", "mock")
        return self.transcript.scene(frame.video_id, frame.start) or f"mock-scene {frame.video_id}@{_fmt_t(frame.start)}"


class OracleReasoner:
    """Answers ``"Answer: <gold>"`` for the first configured key found in the prompt."""

    def __init__(self, answers: Mapping[str, int]):
        self.answers = dict(answers)

    def complete(self, prompt: str) -> str:
        for key, gold in self.answers.items():
            if key in prompt:
                return f"Answer: {gold}"
        return "I do not know."


_OPTION_RE = re.compile(r"^([0-4])\) (.*)$")
_TIME_RE = re.compile(r"t=(\d{2,}:\d{2})")


class LogLookupReasoner:
    """Picks the option whose text appears verbatim as a caption in the prompt's log.

    When several options appear, the one logged at the timestamp mentioned in
    the question wins.
    """

    def complete(self, prompt: str) -> str:
        lines = prompt.split("\n")
        options = {}
        question = ""
        captions: dict[str, list[str]] = {}
        for ln in lines:
            m = _OPTION_RE.match(ln)
            if m:
                options[int(m.group(1))] = m.group(2)
            elif ln.startswith("Question: "):
                question = ln[len("Question: "):]
            elif ln.startswith("t=") and "] " in ln:
                stamp, rest = ln[2:].split(" ", 1)
                captions.setdefault(rest.split("] ", 1)[1], []).append(stamp)
        hits = [i for i, text in sorted(options.items()) if text in captions]
        if not hits:
            return "None of the options appear in the log."
        asked = _TIME_RE.search(question)
        if asked:
            timed = [i for i in hits if asked.group(1) in captions[options[i]]]
            hits = timed or hits
        return f"Answer: {hits[0]}"


class ScriptedReasoner:
    """Returns the same completion for every prompt."""

    def __init__(self, reply: str):
        self.reply = reply

    def complete(self, prompt: str) -> str:
        return self.reply


class MockEmbedder:
    """Hash-seeded unit vectors: identical texts map to identical vectors."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ArgumentError("embedding dimension must be >= 1")
        self.dim = dim

    def vector(self, text: str) -> list[float]:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        v = np.random.Generator(np.random.PCG64(seed)).standard_normal(self.dim)
        return (v / np.linalg.norm(v)).tolist()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        texts = list(texts)
        if not texts:
            raise ArgumentError("embed needs at least one text")
        return [self.vector(t) for t in texts]


# -- in-process server for the wire protocol --


class MockServer:
    """Serves the wire protocol from mock role objects.

    Use :meth:`transport` as the ``transport`` of a :class:`BackendClient`.
    Every request is recorded as ``(route, body_bytes)``.
    """

    def __init__(self, captioner=None, describer=None, reasoner=None, embedder=None):
        self.captioner = captioner or MockActionCaptioner()
        self.describer = describer or MockSceneDescriber()
        self.reasoner = reasoner or LogLookupReasoner()
        self.embedder = embedder or MockEmbedder()
        self.requests: list[tuple[str, bytes]] = []
        self._lock = threading.Lock()

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def handle(self, request: httpx.Request) -> httpx.Response:
        body = request.read()
        route = request.url.path
        with self._lock:
            self.requests.append((route, body))
        if request.method != "POST":
            return _reply(405, {"error": "method not allowed"})
        try:
            req = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return _reply(400, {"error": "body is not JSON"})
        try:
            if route == "/v1/caption":
                control = ControlToken.from_surface(req["control"]) if req.get("control") else None
                clip = ClipRef(req["video_id"], TimeInterval(float(req["start_s"]), float(req["end_s"])))
                return _reply(200, {"text": self.captioner.caption_action(clip, control)})
            if route == "/v1/describe":
                t = float(req["t_s"])
                media = base64.b64decode(req["frame_b64"]) if req.get("frame_b64") else None
                frame = ClipRef(req["video_id"], TimeInterval(t, t + 1.0), media)
                return _reply(200, {"text": self.describer.describe_scene(frame, req["prompt"])})
            if route == "/v1/complete":
                return _reply(200, {"text": self.reasoner.complete(req["prompt"])})
            if route == "/v1/embed":
                return _reply(200, {"vectors": self.embedder.embed(req["texts"])})
        except RequestTooLargeError as exc:
            return _reply(413, {"error": str(exc)})
        except (ProtocolError, ArgumentError) as exc:
            return _reply(422, {"error": str(exc)})
        except (KeyError, TypeError, ValueError) as exc:
            return _reply(400, {"error": f"bad request: {exc}"})
        return _reply(404, {"error": f"no route {route}"})


def _reply(status: int, payload: dict) -> httpx.Response:
    return httpx.Response(status, content=json.dumps(payload, sort_keys=True).encode("utf-8"),
                          headers={"Content-Type": "application/json"})

