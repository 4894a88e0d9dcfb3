import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memloom.errors import ArgumentError, OutOfRangeError
from memloom.segmentation import (
    BoundarySet,
    FeatureSequence,
    FrameRaster,
    boundaries_to_seconds,
    content_score,
    content_scores,
    detect_content_cuts,
    kts_fit,
    kts_scatter,
    kts_segment,
    linear_kernel,
    scatter_matrix,
    segment_uniform,
)
from memloom.synth import gen_feature_stream

from oracles import brute_force_segmentation, normalize_rows, segment_scatter

# -- uniform --


@pytest.mark.parametrize("duration, interval, expected", [
    (180, 120, (0, 120)),
    (120, 120, (0,)),
    (300, 120, (0, 120, 240)),
    (0.5, 120, (0,)),
])
def test_segment_uniform(duration, interval, expected):
    b = segment_uniform(duration, interval)
    assert b.values == expected
    assert b.domain == "seconds"


@pytest.mark.parametrize("args", [(0, 120), (180, 0), (-1, 5)])
def test_segment_uniform_rejects_non_positive(args):
    with pytest.raises(ArgumentError):
        segment_uniform(*args)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 1e4), st.floats(0.01, 1e3))
def test_segment_uniform_is_truncated_progression(duration, interval):
    vals = segment_uniform(duration, interval).values
    assert vals[0] == 0
    assert all(v < duration for v in vals)
    assert vals == tuple(k * interval for k in range(len(vals)))
    assert len(vals) * interval >= duration


# -- content detector --


def test_content_score_identical_frames():
    f = FrameRaster.solid(4, 3, (10, 20, 30))
    assert content_score(f, f) == 0


def test_content_score_black_to_white():
    assert content_score(FrameRaster.solid(4, 3, (0, 0, 0)), FrameRaster.solid(4, 3, (255, 255, 255))) == 255


def test_content_score_two_pixel_frame():
    prev = np.zeros((1, 2, 3), dtype=np.uint8)
    cur = prev.copy()
    cur[0, 1] = 30
    assert content_score(FrameRaster(prev), FrameRaster(cur), (1, 1, 1)) == pytest.approx(15)


def test_content_score_weights():
    prev = FrameRaster.solid(2, 2, (0, 0, 0))
    cur = FrameRaster.solid(2, 2, (90, 0, 0))
    # only the red channel changes; weights (2,1,1) give 2*90/4
    assert content_score(prev, cur, (2, 1, 1)) == pytest.approx(45)


def test_content_score_errors():
    with pytest.raises(ArgumentError):
        content_score(FrameRaster.solid(2, 2, (0, 0, 0)), FrameRaster.solid(3, 2, (0, 0, 0)))
    with pytest.raises(ArgumentError):
        content_score(FrameRaster.solid(2, 2, (0, 0, 0)), FrameRaster.solid(2, 2, (0, 0, 0)), (0, 0, 0))


def test_detect_content_cuts_examples():
    assert detect_content_cuts([1, 2, 3], 27, 1).values == ()
    assert detect_content_cuts([0, 40, 0], 27, 1).values == (2,)
    assert detect_content_cuts([40, 40], 27, 2).values == (1,)


def test_detect_content_cuts_min_len_spacing():
    scores = [0] * 30
    for i in (4, 9, 25):
        scores[i] = 50
    assert detect_content_cuts(scores, 27, 15).values == (5, 26)


def test_content_pipeline_on_solid_runs():
    frames = [FrameRaster.solid(4, 4, (0, 0, 0))] * 20 + [FrameRaster.solid(4, 4, (200, 200, 200))] * 20
    assert detect_content_cuts(content_scores(frames), 27, 15).values == (20,)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 255), max_size=40), st.floats(1, 100), st.integers(1, 10), st.floats(0.01, 100))
def test_detect_content_cuts_scale_invariant(scores, threshold, min_len, scale):
    base = detect_content_cuts(scores, threshold, min_len)
    scaled = detect_content_cuts([s * scale for s in scores], threshold * scale, min_len)
    # Scaling can only change a decision when s and threshold are within rounding of each other.
    if all(abs(s - threshold) > 1e-9 * threshold for s in scores):
        assert base == scaled


# -- KTS --


def test_kts_scatter_hand_value():
    K = np.array([[1.0, 3.0], [3.0, 9.0]])
    assert kts_scatter(K, 0, 1) == pytest.approx(2.0)
    assert kts_scatter(K, 0, 0) == 0
    assert kts_scatter(K, 1, 1) == 0


def test_kts_scatter_constant_segment():
    x = np.tile([[0.3, 0.4]], (5, 1))
    assert kts_scatter(x @ x.T, 0, 4) == pytest.approx(0, abs=1e-12)


def test_kts_scatter_out_of_range():
    with pytest.raises(OutOfRangeError):
        kts_scatter(np.eye(3), 2, 3)
    with pytest.raises(OutOfRangeError):
        kts_scatter(np.eye(3), 2, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 5))
def test_kts_scatter_matches_direct_scatter(seed, n, dim):
    x = np.random.default_rng(seed).standard_normal((n, dim))
    K = x @ x.T
    J = scatter_matrix(K)
    for a, b in itertools.combinations_with_replacement(range(n), 2):
        direct = segment_scatter(x[a:b + 1])
        assert kts_scatter(K, a, b) == pytest.approx(direct, abs=1e-9)
        assert J[a, b] == pytest.approx(direct, abs=1e-9)
        assert kts_scatter(K, a, b) >= -1e-12


def test_kts_constant_features_one_segment():
    feats = FeatureSequence(np.ones((30, 4)))
    for m in (1, 2, 5, 30):
        assert kts_segment(feats, m, 1.0).values == ()


def test_kts_two_step_example():
    feats = FeatureSequence(np.array([[0.0], [0], [0], [5], [5], [5]]))
    res = kts_fit(feats, max_segments=2, penalty_weight=0)
    assert res.boundaries.values == (3,)
    assert res.scatter == pytest.approx(0, abs=1e-12)


def test_kts_two_step_example_exhaustive_oracle():
    x = np.array([[0.0], [0], [0], [5], [5], [5]])
    cps, total = brute_force_segmentation(x, 2)
    assert cps == (3,)
    assert total == 0


def test_kts_planted_three_segments():
    feats, planted = gen_feature_stream(7, 60, 4, [20, 40], 0.05)
    found = kts_segment(feats, 5, 1.0).values
    assert len(found) == 2
    assert all(abs(f - p) <= 1 for f, p in zip(found, planted.values))


def test_kts_fixed_count_matches_oracle_on_planted_stream():
    feats, _ = gen_feature_stream(7, 18, 4, [6, 12], 0.05)
    cps, _ = brute_force_segmentation(feats.data, 3)
    assert kts_fit(feats, fixed_segments=3, penalty_weight=0).boundaries.values == cps


def test_kts_penalty_prefers_fewer_segments_on_short_streams():
    # The penalty grows with m faster than the residual scatter shrinks when n is tiny.
    feats, _ = gen_feature_stream(7, 18, 4, [6, 12], 0.05)
    assert kts_segment(feats, 5, 1.0).values == (6,)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(1, 3), st.integers(1, 4))
def test_kts_dp_equals_exhaustive_search(seed, n, dim, m):
    m = min(m, n)
    x = np.random.default_rng(seed).standard_normal((n, dim))
    res = kts_fit(FeatureSequence(x), fixed_segments=m, penalty_weight=0)
    cps, total = brute_force_segmentation(x, m)
    assert res.scatter == pytest.approx(total, abs=1e-9)
    assert res.boundaries.values == cps


def test_kts_costs_non_increasing():
    x = np.random.default_rng(3).standard_normal((15, 3))
    costs = kts_fit(FeatureSequence(x), max_segments=10, penalty_weight=0).costs
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


@pytest.mark.parametrize("levels, runs, extra", [
    ([[1, 0], [0, 1]], [10, 10], 15),
    ([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [6, 6, 6], 30),
    ([[1, 0], [0.6, 0.8], [0, 1]], [8, 8, 8], 8),
])
def test_kts_constant_suffix_never_adds_segments(levels, runs, extra):
    rows = [lvl for lvl, r in zip(levels, runs) for _ in range(r)]
    before = kts_fit(FeatureSequence(np.array(rows, dtype=float)), 10, 1.0).segments
    rows += [levels[-1]] * extra
    after = kts_fit(FeatureSequence(np.array(rows, dtype=float)), 10, 1.0).segments
    assert after <= before


def test_kts_clamps_max_segments():
    x = np.random.default_rng(0).standard_normal((4, 2))
    res = kts_fit(FeatureSequence(x), max_segments=50, penalty_weight=0)
    assert len(res.costs) == 4


def test_kts_argument_errors():
    feats = FeatureSequence(np.ones((3, 2)))
    with pytest.raises(ArgumentError):
        kts_segment(feats, 0)
    with pytest.raises(ArgumentError):
        kts_segment(feats, 2, -1)
    with pytest.raises(ArgumentError):
        FeatureSequence(np.zeros((0, 3)))
    with pytest.raises(ArgumentError):
        kts_segment(np.ones((3, 2)), 2)


def test_linear_kernel_normalizes_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    K = linear_kernel(x)
    assert K[0, 0] == pytest.approx(1.0)
    assert K[1, 1] == 0
    np.testing.assert_allclose(normalize_rows(x) @ normalize_rows(x).T, K)


def test_kts_is_bit_deterministic():
    x = np.random.default_rng(11).standard_normal((40, 6))
    a = kts_fit(FeatureSequence(x), 8, 0.5)
    b = kts_fit(FeatureSequence(x.copy()), 8, 0.5)
    assert a == b


# -- boundary sets --


@pytest.mark.parametrize("frames, fps, seconds", [((), 30, ()), ((30,), 30, (1.0,)), ((15, 45), 30, (0.5, 1.5))])
def test_boundaries_to_seconds(frames, fps, seconds):
    assert boundaries_to_seconds(BoundarySet(frames), fps).values == seconds


def test_boundary_set_invariants():
    with pytest.raises(ArgumentError):
        BoundarySet((3, 3))
    with pytest.raises(OutOfRangeError):
        BoundarySet((1, 10), limit=10)
    with pytest.raises(ArgumentError):
        boundaries_to_seconds(BoundarySet((1,)), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000))
def test_all_segmenters_emit_increasing_in_range(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    feats = FeatureSequence(rng.standard_normal((n, 3)))
    for b in (kts_segment(feats, 6, float(rng.uniform(0, 2))),
              detect_content_cuts(list(rng.uniform(0, 60, n - 1)), 27, int(rng.integers(1, 5))),
              segment_uniform(float(rng.uniform(1, 500)), float(rng.uniform(1, 200)))):
        vals = b.values
        assert all(b2 > b1 for b1, b2 in zip(vals, vals[1:]))
        assert all(0 <= v < b.limit for v in vals)
