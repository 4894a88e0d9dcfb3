"""Acceptance suite: one group of checks per numbered criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from memloom.backends import MockEmbedder, MockSceneDescriber
from memloom.cli import main
from memloom.decoding import GenerationConfig, apply_repetition_penalty, next_distribution, softmax
from memloom.io import decode_rgb8, read_jsonl, write_jsonl
from memloom.memory import TimeInterval
from memloom.metrics import (
    bleu4,
    boundary_f1,
    caption_similarity_report,
    cosine,
    grouped_report,
    meteor,
    meteor_parts,
    rouge_l,
)
from memloom.pipeline import DistillClip, GroundTruthAction, build_distillation_dataset, validate_record
from memloom.segmentation import FeatureSequence, FrameRaster, detect_content_cuts, kts_fit, segment_uniform
from memloom.synth import gen_feature_stream

from oracles import brute_force_segmentation


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# 1 --------------------------------------------------------------------------


@criterion(1, "KTS equals exhaustive search on 200 random streams")
def test_kts_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 17))
        dim = int(rng.integers(1, 5))
        m = int(rng.integers(1, min(4, n) + 1))
        x = rng.standard_normal((n, dim))
        res = kts_fit(FeatureSequence(x), fixed_segments=m, penalty_weight=0.0)
        cps, total = brute_force_segmentation(x, m)
        assert res.boundaries.values == cps
        assert abs(res.scatter - total) <= 1e-9
    assert time.perf_counter() - t0 < 30


# 2 --------------------------------------------------------------------------


@criterion(2, "planted boundaries recovered, mean F1 >= 0.9 over 20 seeds")
def test_planted_boundary_recovery():
    from memloom.segmentation import kts_segment

    t0 = time.perf_counter()
    scores = []
    for seed in range(20):
        feats, planted = gen_feature_stream(seed, 60, 8, [20, 40], 0.05)
        found = kts_segment(feats, 32, 1.0)
        scores.append(boundary_f1(found.values, planted.values, 1)[2])
    elapsed = time.perf_counter() - t0
    print(f"mean boundary F1 {np.mean(scores):.3f} in {elapsed:.2f}s")
    assert np.mean(scores) >= 0.9
    assert elapsed < 10


# 3 --------------------------------------------------------------------------


@criterion(3, "uniform segmentation exactness and progression property")
def test_uniform_exact():
    assert segment_uniform(180, 120).values == (0, 120)


@criterion(3, "uniform segmentation exactness and progression property")
def test_uniform_property():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        duration = float(rng.uniform(0.01, 5000))
        interval = float(rng.uniform(0.01, 500))
        vals = segment_uniform(duration, interval).values
        assert vals[0] == 0
        assert vals == tuple(k * interval for k in range(len(vals)))
        assert vals[-1] < duration <= len(vals) * interval


# 4 --------------------------------------------------------------------------


def _random_logits(rng, k):
    return rng.normal(0, 3, size=k)


@criterion(4, "repetition-penalty identities")
def test_penalty_theta_one_bit_exact():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        x = _random_logits(rng, int(rng.integers(1, 50)))
        hist = set(rng.choice(x.size, size=int(rng.integers(0, x.size + 1)), replace=False).tolist())
        out = apply_repetition_penalty(x, hist, 1.0)
        assert out.tobytes() == x.tobytes()


@criterion(4, "repetition-penalty identities")
def test_penalty_theta_three_lowers_positive_history_tokens():
    rng = np.random.default_rng(44)
    cfg = GenerationConfig(repetition_penalty=3.0)
    for _ in range(1000):
        x = _random_logits(rng, int(rng.integers(2, 50)))
        before = softmax(x)
        # each positive token penalized on its own loses probability
        for i in np.flatnonzero(x > 0):
            assert next_distribution(x, {int(i)}, cfg)[i] < before[i]
        # with a shared history every positive history token loses ground against every fresh token
        hist = set(rng.choice(x.size, size=int(rng.integers(1, x.size)), replace=False).tolist())
        after = next_distribution(x, hist, cfg)
        fresh = [j for j in range(x.size) if j not in hist]
        for i in hist:
            if x[i] > 0:
                assert all(after[i] / after[j] < before[i] / before[j] for j in fresh)


@criterion(4, "repetition-penalty identities")
def test_penalty_composition():
    rng = np.random.default_rng(444)
    for _ in range(1000):
        k = int(rng.integers(1, 50))
        x = rng.uniform(0.01, 10, size=k) * (1 if rng.random() < 0.5 else -1)
        hist = set(rng.choice(k, size=int(rng.integers(0, k + 1)), replace=False).tolist())
        theta = float(rng.uniform(1, 5))
        twice = apply_repetition_penalty(apply_repetition_penalty(x, hist, theta), hist, theta)
        once = apply_repetition_penalty(x, hist, theta**2)
        np.testing.assert_allclose(twice, once, rtol=1e-12, atol=0)


# 5 --------------------------------------------------------------------------


@criterion(5, "metric hand values")
def test_metric_hand_values():
    tol = 1e-4
    assert abs(bleu4(["a b c d e"], ["a b c d e"]) - 1.0) <= tol
    assert abs(bleu4(["a b c d"], ["a b c d e"]) - math.exp(1 - 5 / 4)) <= tol
    assert abs(bleu4(["a b c d"], ["a b c d e"]) - 0.7788) <= tol
    assert bleu4(["a b c d e"], ["e d c b a"]) == 0
    assert abs(rouge_l("a b c", "a c") - 0.8) <= tol
    assert rouge_l("a b", "c d") == 0
    assert meteor("x", "y") == 0
    assert abs(meteor("the cat", "the cat") - 0.9375) <= tol
    p = meteor_parts("the cat sat", "the cat")
    assert abs(p.fmean - 0.95238) <= tol
    assert abs(p.score - 0.89286) <= tol
    assert abs(cosine([1, 0], [1, 1]) - 1 / math.sqrt(2)) <= tol
    assert abs(cosine([1, 0], [1, 1]) - 0.70711) <= tol
    assert cosine([1, 0], [0, 1]) == 0
    assert boundary_f1([10], [12], 2) == (1, 1, 1)
    assert boundary_f1([10, 50], [12], 2) == pytest.approx((0.5, 1, 2 / 3), abs=tol)


@criterion(5, "metric hand values")
def test_identical_pair_report():
    rep = caption_similarity_report([("the cat", "the cat")], MockEmbedder())
    assert rep.bleu == 0.0  # two tokens have no 4-grams, so unsmoothed BLEU-4 is zero
    rep = caption_similarity_report([("the cat sat on the mat", "the cat sat on the mat")], MockEmbedder())
    assert rep.bleu == 1.0 and rep.rouge_l == 1.0
    assert abs(rep.cosine_mean - 1.0) <= 1e-9
    assert abs(caption_similarity_report([("the cat", "the cat")], MockEmbedder()).meteor - 0.9375) <= 1e-4


# 6 --------------------------------------------------------------------------


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


def _end_to_end(root, capsys):
    synth = root / "synth"
    _cli("synth", "--out-dir", synth, "--seed", 11)
    _cli("build-memory", "--config", synth / "config.json", "--output", root / "log.jsonl",
         "--render", root / "log.txt", "--max-workers", 4)
    capsys.readouterr()
    _cli("ask", "--config", synth / "config.json", "--mock-reasoner", "oracle", "--log", root / "log.jsonl",
         "--tasks", synth / "tasks.jsonl", "--output", root / "preds.jsonl")
    summary = json.loads(capsys.readouterr().out)
    return summary


@criterion(6, "end-to-end determinism, oracle accuracy 100, scene-off baseline")
def test_end_to_end_determinism(tmp_path, capsys):
    s1 = _end_to_end(tmp_path / "run1", capsys)
    s2 = _end_to_end(tmp_path / "run2", capsys)
    for name in ("log.jsonl", "log.txt", "preds.jsonl"):
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    assert s1 == s2
    assert s1["accuracy"] == 100.0
    assert s1["tasks"] == 47


@criterion(6, "end-to-end determinism, oracle accuracy 100, scene-off baseline")
def test_scene_captions_off(tmp_path, capsys):
    synth = tmp_path / "synth"
    _cli("synth", "--out-dir", synth, "--seed", 11)
    _cli("build-memory", "--config", synth / "config.json", "--scene-captions", "off",
         "--output", tmp_path / "log.jsonl", "--render", tmp_path / "log.txt")
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert len(lines) == 45
    assert sum("[SCENE]" in ln for ln in lines) == 0


# 7 --------------------------------------------------------------------------


def _indexed_frames(n):
    # pixel (0,0) encodes the frame index so the shipped frame can be identified
    return [FrameRaster(np.full((2, 2, 3), [i % 256, i // 256, 7], dtype=np.uint8)) for i in range(n)]


@criterion(7, "distillation schema and center-frame rule")
def test_distillation_schema():
    seen = []

    class Recorder(MockSceneDescriber):
        def describe_scene(self, frame, prompt):
            px = decode_rgb8(frame.media)[0].pixels[0, 0]
            seen.append((frame.video_id, int(px[0]) + 256 * int(px[1])))
            return super().describe_scene(frame, prompt)

    sizes = [64, 32, 1, 33, 100, 31, 480, 7]
    clips = [DistillClip(f"vid{k % 3}", TimeInterval(10.0 * k, 10.0 * k + 8), n, _indexed_frames(n))
             for k, n in enumerate(sizes)]
    gts = [GroundTruthAction(f"vid{k % 3}", 10.0 * k, 10.0 * k + 8, f"does thing {k}") for k in range(5)]
    res = build_distillation_dataset(clips, Recorder(), gts)
    assert [idx for _, idx in seen] == [math.floor(16.5 * n / 32) for n in sizes]
    assert seen[0][1] == 33 and seen[1][1] == 16
    scx = [r for r in res.records if r["control"] == "[SCX]"]
    acx = [r for r in res.records if r["control"] == "[ACX]"]
    assert len(scx) == len(clips) and len(acx) == len(gts)
    assert sum(len(validate_record(r)) for r in res.records) == 0
    assert res.skipped == 0


@criterion(7, "distillation schema and center-frame rule")
def test_distillation_cli(tmp_path, capsys):
    clips, gt, out = tmp_path / "clips.jsonl", tmp_path / "gt.jsonl", tmp_path / "ds.jsonl"
    write_jsonl(clips, [{"video_id": "v", "start_s": 4 * i, "end_s": 4 * i + 4, "n_frames": 64} for i in range(3)])
    write_jsonl(gt, [{"video_id": "v", "start_s": 4 * i, "end_s": 4 * i + 4, "text": f"gt {i}"} for i in range(3)])
    _cli("distill", "--mock", "--clips", clips, "--gt-actions", gt, "--output", out)
    recs = read_jsonl(out)
    assert [r["control"] for r in recs].count("[SCX]") == 3
    assert [r["control"] for r in recs].count("[ACX]") == 3
    assert all(not validate_record(r) for r in recs)


# 8 --------------------------------------------------------------------------


@criterion(8, "content detector invariant under joint scaling")
def test_content_scaling_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(1, 200))
        scores = rng.uniform(0, 80, n).tolist()
        threshold = float(rng.uniform(5, 60))
        min_len = int(rng.integers(1, 20))
        scale = float(rng.choice([0.25, 0.5, 2.0, 4.0, 1024.0]))
        base = detect_content_cuts(scores, threshold, min_len)
        scaled = detect_content_cuts([s * scale for s in scores], threshold * scale, min_len)
        assert base.values == scaled.values


# 9 --------------------------------------------------------------------------

ACTION_PAIRS = [
    ("opens the fridge door", "opens the fridge"),
    ("cuts the onion on the board", "cuts an onion on the board"),
    ("picks up the red cup", "picks up a red cup"),
    ("washes the knife", "washes the knife in the sink"),
    ("puts the pan on the stove", "places the pan on the stove"),
]
SCENE_PAIRS = [
    ("A bright kitchen with white cabinets, a steel fridge on the left, a wooden table holding two plates and "
     "a glass bowl of green apples, and a window above the sink letting in daylight.",
     "The kitchen has white cupboards and a silver refrigerator, a table made of wood with plates on it, "
     "a glass bowl of green apples, and sunlight coming through a window over the basin."),
    ("A cluttered workbench in a garage with a red toolbox, scattered screwdrivers, a coil of orange cable, "
     "a bicycle leaning on the wall and shelves full of paint cans.",
     "In the garage there is a bench covered in tools, a red toolbox, scattered screwdrivers, an extension "
     "cord, a bike against the wall and paint tins stacked on shelves."),
    ("A small living room with a grey sofa, a low coffee table with a laptop and a mug, a striped rug, "
     "and a tall lamp standing beside a bookshelf.",
     "Living room containing a gray couch, a coffee table where a laptop and cup sit, a rug with stripes, "
     "and a tall lamp standing beside a bookshelf."),
    ("An office desk with two monitors, a black keyboard, a notebook with a pen on top, a potted plant and "
     "a stack of folders near the edge.",
     "A work desk holding a pair of screens and a keyboard, a notepad and pen, a plant in a pot, "
     "and some folders piled at the side."),
    ("A laundry room with a front-loading washer, a plastic basket full of towels, a folded ironing board "
     "against the wall and a shelf with detergent bottles.",
     "The laundry area has a washing machine, a basket of towels, an ironing board leaning on the wall, "
     "and bottles of soap on a shelf."),
]


@criterion(9, "scene BLEU below action BLEU on a long-scene fixture")
def test_scene_bleu_below_action_bleu():
    from memloom.metrics import tokenize

    action_len = np.mean([len(tokenize(r)) for _, r in ACTION_PAIRS])
    scene_len = np.mean([len(tokenize(r)) for _, r in SCENE_PAIRS])
    assert scene_len >= 3 * action_len
    triples = [("action", h, r) for h, r in ACTION_PAIRS] + [("scene", h, r) for h, r in SCENE_PAIRS]
    rep = grouped_report(triples, MockEmbedder())
    print(f"action BLEU {rep['action']['bleu']:.4f}, scene BLEU {rep['scene']['bleu']:.4f}")
    assert 0 < rep["scene"]["bleu"] < rep["action"]["bleu"]
