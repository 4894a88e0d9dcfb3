"""Control-token prompting and repetition-penalized decoding.

Works against any callable that maps a token-id sequence to a logits vector,
so a fine-tuned captioner served elsewhere, or a table-driven toy model in
tests, can be driven the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Literal, Mapping, Sequence

import numpy as np

from memloom.errors import ArgumentError, ConfigurationError, FormatError
from memloom.memory import ACX, SCX, CaptionKind, ControlToken

LanguageModel = Callable[[Sequence[int]], Sequence[float]]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        for ct in (ACX, SCX):
            if tokens.count(ct.surface) > 1:
                raise ConfigurationError(f"control token {ct.surface} registered more than once")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def with_control_tokens(cls, base: Iterable[str]) -> "Vocabulary":
        """Append ``[ACX]`` and ``[SCX]`` to a base vocabulary if missing."""
        tokens = list(base)
        for ct in (ACX, SCX):
            if ct.surface not in tokens:
                tokens.append(ct.surface)
        return cls(tuple(tokens))

    @property
    def control_ids(self) -> dict[ControlToken, int]:
        return {ct: self._index[ct.surface] for ct in (ACX, SCX) if ct.surface in self._index}

    def id_of(self, surface: str) -> int:
        try:
            return self._index[surface]
        except KeyError:
            raise ArgumentError(f"token {surface!r} not in vocabulary") from None

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids: Iterable[int], skip_control: bool = True) -> str:
        control = {ACX.surface, SCX.surface}
        words = [self.tokens[i] for i in ids]
        if skip_control:
            words = [w for w in words if w not in control]
        return " ".join(words)


def control_prelude(kind: CaptionKind, vocab: Vocabulary) -> list[int]:
    token = ControlToken.for_kind(kind)
    ids = vocab.control_ids
    if token not in ids:
        raise ConfigurationError(f"control token {token.surface} is not registered in the vocabulary")
    return [ids[token]]


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 1.0
    repetition_penalty: float = 3.0
    max_new_tokens: int = 64
    stop_ids: frozenset[int] = field(default_factory=frozenset)
    mode: Literal["greedy", "sample"] = "greedy"
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ArgumentError(f"temperature must be positive, got {self.temperature}")
        if not self.repetition_penalty >= 1:
            raise ArgumentError(f"repetition penalty must be >= 1, got {self.repetition_penalty}")
        if self.max_new_tokens < 1:
            raise ArgumentError("max_new_tokens must be positive")
        if self.mode not in ("greedy", "sample"):
            raise ArgumentError(f"unknown decoding mode {self.mode!r}")
        object.__setattr__(self, "stop_ids", frozenset(self.stop_ids))


def _as_logits(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError(f"logits must be a vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("logits must be finite")
    return x


def apply_repetition_penalty(logits, history: Iterable[int], theta: float) -> np.ndarray:
    """Shrink the logits of already-generated tokens toward less likely.

    Positive logits are divided by ``theta``, negative ones multiplied, zeros
    untouched; ``theta == 1`` returns an exact copy.
    """
    if not theta >= 1:
        raise ArgumentError(f"repetition penalty must be >= 1, got {theta}")
    x = _as_logits(logits).copy()
    if theta == 1:
        return x
    idx = np.fromiter(set(history), dtype=np.int64)
    if idx.size == 0:
        return x
    if idx.min() < 0 or idx.max() >= x.size:
        raise ArgumentError("history contains token ids outside the vocabulary")
    vals = x[idx]
    x[idx] = np.where(vals > 0, vals / theta, np.where(vals < 0, vals * theta, vals))
    return x


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def next_distribution(logits, history: Iterable[int], cfg: GenerationConfig) -> np.ndarray:
    penalized = apply_repetition_penalty(logits, history, cfg.repetition_penalty)
    return softmax(penalized / cfg.temperature)


def generate(lm: LanguageModel, prompt: Sequence[int], cfg: GenerationConfig) -> list[int]:
    """Autoregressively extend ``prompt``; returns only the new tokens.

    Only tokens generated in this call count as history for the penalty.
    A stop id ends generation and is not included in the output.
    """
    if not prompt:
        raise ArgumentError("prompt must contain at least one token")
    rng = np.random.default_rng(cfg.seed) if cfg.mode == "sample" else None
    seq = list(prompt)
    out: list[int] = []
    history: set[int] = set()
    for _ in range(cfg.max_new_tokens):
        probs = next_distribution(lm(tuple(seq)), history, cfg)
        if rng is None:
            tok = int(np.argmax(probs))  # first maximum, i.e. lowest id on ties
        else:
            tok = int(rng.choice(probs.size, p=probs))
        if tok in cfg.stop_ids:
            break
        out.append(tok)
        history.add(tok)
        seq.append(tok)
    return out


class TableLM:
    """Toy language model driven by a lookup table of context suffixes.

    Fixture format, one rule per line::

        <space-separated token ids> | <space-separated logits>

    An empty suffix is the fallback row. The longest suffix matching the end
    of the context wins. ``#`` starts a comment.
    """

    def __init__(self, rules: Mapping[tuple[int, ...], Sequence[float]]):
        if () not in rules:
            raise FormatError("table LM needs a fallback row with an empty suffix")
        width = {len(v) for v in rules.values()}
        if len(width) != 1:
            raise FormatError("all logits rows must have the same length")
        self.rules = {tuple(k): _as_logits(v) for k, v in rules.items()}
        self.vocab_size = width.pop()
        self._max_suffix = max(len(k) for k in self.rules)
        self.calls = 0

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        self.calls += 1
        ctx = tuple(context)
        for k in range(min(self._max_suffix, len(ctx)), -1, -1):
            row = self.rules.get(ctx[len(ctx) - k:] if k else ())
            if row is not None:
                return row.copy()
        raise AssertionError("fallback row missing")  # unreachable, checked in __init__

    @classmethod
    def parse(cls, text: str) -> "TableLM":
        rules = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "|" not in line:
                raise FormatError(f"line {lineno}: expected '<suffix> | <logits>'")
            lhs, rhs = line.split("|", 1)
            try:
                key = tuple(int(t) for t in lhs.split())
                row = [float(v) for v in rhs.split()]
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            rules[key] = row
        return cls(rules)

    @classmethod
    def load(cls, path) -> "TableLM":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


class HybridCaptioner:
    """Action captioner backed by a local logits model steered with control tokens.

    ``lm_for_clip`` builds the clip-conditioned language model; visual
    conditioning lives entirely inside it.
    """

    def __init__(self, lm_for_clip: Callable, vocab: Vocabulary, cfg: GenerationConfig | None = None,
                 source: str = "hybrid-local"):
        self.lm_for_clip = lm_for_clip
        self.vocab = vocab
        self.cfg = cfg or GenerationConfig()
        self.source = source

    def caption_action(self, clip, control: ControlToken | None = None) -> str:
        kind = control.kind if control is not None else CaptionKind.ACTION
        ids = generate(self.lm_for_clip(clip), control_prelude(kind, self.vocab), self.cfg)
        return self.vocab.decode(ids)


def penalty_sweep(score: Callable[[float], float], values: Sequence[float]) -> tuple[float, dict[float, float]]:
    """Evaluate ``score`` at each penalty value; return the best value and all scores.

    Ties go to the earliest value in ``values``.
    """
    results = {float(v): float(score(float(v))) for v in values}
    best = max(results, key=lambda v: (results[v], -list(results).index(v)))
    if math.isnan(results[best]):
        raise ArgumentError("sweep produced NaN scores")
    return best, results
