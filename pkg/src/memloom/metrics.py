"""Caption-quality and accuracy metrics.

Lexical metrics share :func:`tokenize`. BLEU-4 is corpus-level and
unsmoothed, ROUGE-L is the plain LCS F1, and METEOR uses exact unigram
matches only (no stemming or synonym tables).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from memloom.errors import ArgumentError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str | Sequence[str]) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens.

    Already-tokenized input is re-tokenized element-wise, which makes the
    function idempotent: ``tokenize(" ".join(tokenize(x))) == tokenize(x)``.
    """
    if not isinstance(text, str):
        text = " ".join(text)
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(cand: Sequence[str], ref: Sequence[str], max_n: int) -> tuple[list[int], list[int]]:
    matched, total = [], []
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matched.append(sum(min(cnt, r[g]) for g, cnt in c.items()))
        total.append(max(len(cand) - n + 1, 0))
    return matched, total


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return math.exp(min(0.0, 1.0 - r / c))


def bleu4(candidates: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram counts pooled over all pairs, geometric mean, brevity penalty.

    Any n-gram order with zero matches gives 0.
    """
    if len(candidates) != len(references):
        raise ArgumentError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ArgumentError("BLEU needs a non-empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = tokenize(cand), tokenize(ref)
        m, t = _bleu_stats(ct, rt, max_n)
        matched = [a + b for a, b in zip(matched, m)]
        total = [a + b for a, b in zip(total, t)]
        c_len += len(ct)
        r_len += len(rt)
    if any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    return _brevity_penalty(c_len, r_len) * math.exp(log_p)


def sentence_bleu(candidate: str, reference: str, max_n: int = 4, smooth: bool = True) -> float:
    """Per-sentence diagnostic BLEU; ``smooth`` adds one to numerator and denominator for n >= 2."""
    ct, rt = tokenize(candidate), tokenize(reference)
    matched, total = _bleu_stats(ct, rt, max_n)
    if smooth:
        matched = [matched[0]] + [m + 1 for m in matched[1:]]
        total = [total[0]] + [t + 1 for t in total[1:]]
    if any(m == 0 for m in matched) or any(t == 0 for t in total):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    return _brevity_penalty(len(ct), len(rt)) * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def _greedy_alignment(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Repeatedly align the longest run of still-unaligned tokens common to both sides (leftmost on ties)."""
    free_c = [True] * len(cand)
    free_r = [True] * len(ref)
    pairs: list[tuple[int, int]] = []
    nc, nr = len(cand), len(ref)
    while True:
        # run[i][j]: length of the free common run starting at cand[i], ref[j]
        run = [[0] * (nr + 1) for _ in range(nc + 1)]
        best = (0, 0, 0)  # length, cand start, ref start
        for i in range(nc - 1, -1, -1):
            if not free_c[i]:
                continue
            row, nxt, ci = run[i], run[i + 1], cand[i]
            for j in range(nr - 1, -1, -1):
                if free_r[j] and ci == ref[j]:
                    row[j] = nxt[j + 1] + 1
                    if (row[j], -i, -j) >= (best[0], -best[1], -best[2]):
                        best = (row[j], i, j)
        k, i, j = best
        if k == 0:
            break
        for d in range(k):
            free_c[i + d] = free_r[j + d] = False
            pairs.append((i + d, j + d))
    return sorted(pairs)


METEOR_SEARCH_BUDGET = 20_000


def meteor_alignment(cand: Sequence[str], ref: Sequence[str],
                     budget: int = METEOR_SEARCH_BUDGET) -> list[tuple[int, int]]:
    """Maximum one-to-one exact-match alignment with the fewest chunks.

    Returns ``(cand_idx, ref_idx)`` pairs sorted by candidate position. The
    greedy longest-run alignment seeds a depth-first branch and bound that
    visits at most ``budget`` nodes; within the budget the result is optimal,
    beyond it it is never worse than the greedy seed.
    """
    best_pairs = _greedy_alignment(cand, ref)
    m_max = len(best_pairs)
    if m_max == 0:
        return best_pairs
    best_chunks = count_chunks(best_pairs)
    if best_chunks == 1:
        return best_pairs

    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    # remaining[i][tok]: occurrences of tok in cand[i:]
    remaining = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        remaining[i] = remaining[i + 1].copy()
        remaining[i][cand[i]] += 1
    free_count = Counter(ref)
    used = [False] * len(ref)
    path: list[tuple[int, int]] = []
    nodes = 0

    def reachable(i: int) -> int:
        return sum(min(n, free_count[t]) for t, n in remaining[i].items())

    def walk(i: int, chunks: int, last_j: int) -> None:
        nonlocal best_pairs, best_chunks, nodes
        nodes += 1
        if chunks >= best_chunks or nodes > budget:
            return
        if len(path) + reachable(i) < m_max:
            return
        if i == len(cand):
            best_pairs, best_chunks = sorted(path), chunks
            return
        tok = cand[i]
        order = positions.get(tok, [])
        if last_j >= 0 and last_j + 1 < len(ref) and ref[last_j + 1] == tok:
            order = [last_j + 1] + [j for j in order if j != last_j + 1]
        for j in order:
            if used[j]:
                continue
            used[j] = True
            free_count[tok] -= 1
            path.append((i, j))
            walk(i + 1, chunks + (0 if last_j >= 0 and j == last_j + 1 else 1), j)
            path.pop()
            free_count[tok] += 1
            used[j] = False
        walk(i + 1, chunks, -1)

    walk(0, 0, -1)
    return best_pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


@dataclass(frozen=True)
class MeteorParts:
    matches: int
    chunks: int
    precision: float
    recall: float
    fmean: float
    penalty: float
    score: float


def meteor_parts(candidate: str, reference: str) -> MeteorParts:
    c, r = tokenize(candidate), tokenize(reference)
    pairs = meteor_alignment(c, r)
    m = len(pairs)
    if m == 0:
        return MeteorParts(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0)
    chunks = count_chunks(pairs)
    p, rec = m / len(c), m / len(r)
    fmean = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return MeteorParts(m, chunks, p, rec, fmean, penalty, fmean * (1 - penalty))


def meteor(candidate: str, reference: str) -> float:
    return meteor_parts(candidate, reference).score


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a, b = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ArgumentError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def mcq_accuracy(predictions: Sequence[int], gold: Sequence[int]) -> float:
    """Percentage of predictions equal to the gold option index."""
    if len(predictions) != len(gold):
        raise ArgumentError(f"{len(predictions)} predictions vs {len(gold)} gold labels")
    if not gold:
        raise ArgumentError("accuracy over zero questions is undefined")
    return 100.0 * sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def boundary_f1(pred: Iterable[float], gold: Iterable[float], tol: float) -> tuple[float, float, float]:
    """Precision, recall, F1 of predicted boundaries under a one-to-one ``±tol`` matching.

    Candidate pairs are matched nearest-first. Two empty sets score a perfect 1.
    """
    if tol < 0:
        raise ArgumentError("tolerance must be non-negative")
    p, g = list(pred), list(gold)
    if not p and not g:
        return 1.0, 1.0, 1.0
    cands = sorted((abs(a - b), i, j) for i, a in enumerate(p) for j, b in enumerate(g) if abs(a - b) <= tol)
    used_p, used_g = set(), set()
    for _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    tp = len(used_p)
    precision = tp / len(p) if p else 0.0
    recall = tp / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class SimilarityReport:
    bleu: float
    rouge_l: float
    meteor: float
    cosine_mean: float
    pairs: int

    def table_row(self) -> dict:
        return {"bleu": self.bleu, "rouge_l": self.rouge_l, "meteor": self.meteor, "sbert_cosine": self.cosine_mean}


def caption_similarity_report(pairs: Sequence[tuple[str, str]], embedder) -> SimilarityReport:
    """Corpus BLEU-4, mean ROUGE-L, mean METEOR and mean embedding cosine over (hypothesis, reference) pairs."""
    if not pairs:
        raise ArgumentError("similarity report needs at least one pair")
    hyps = [h for h, _ in pairs]
    refs = [r for _, r in pairs]
    vecs = embedder.embed(hyps + refs)
    cos = [cosine(vecs[i], vecs[len(pairs) + i]) for i in range(len(pairs))]
    return SimilarityReport(
        bleu=bleu4(hyps, refs),
        rouge_l=float(np.mean([rouge_l(h, r) for h, r in pairs])),
        meteor=float(np.mean([meteor(h, r) for h, r in pairs])),
        cosine_mean=float(np.mean(cos)),
        pairs=len(pairs),
    )


def grouped_report(pairs: Sequence[tuple[str, str, str]], embedder) -> dict[str, dict]:
    """Report per caption kind plus ``overall``, from ``(kind, hyp, ref)`` triples."""
    groups: dict[str, list[tuple[str, str]]] = {}
    for kind, h, r in pairs:
        groups.setdefault(kind, []).append((h, r))
    out = {k: caption_similarity_report(v, embedder).table_row() for k, v in sorted(groups.items())}
    out["overall"] = caption_similarity_report([(h, r) for _, h, r in pairs], embedder).table_row()
    return out
