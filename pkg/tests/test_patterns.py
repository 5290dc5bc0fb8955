"""Tests for pattern mining, midrange centers, and min-max matching."""

import itertools

import numpy as np
import pytest

from patternkv.errors import DataError, UsageError
from patternkv.patterns import (
    ORIGIN_DECODE,
    ORIGIN_PREFILL,
    PatternSet,
    lloyd_kmeans,
    match_many,
    match_pattern,
    midrange_center,
    mine_patterns,
    minmax_distance,
    reconstruct_vector,
)
from patternkv.quant import dequantize_group, quantize_group


def wss(vectors, centers, labels):
    """Within-cluster sum of squared deviations."""
    return float(((vectors - centers[labels]) ** 2).sum())


def two_cluster_instance(rng, jitter=0.01):
    """Twenty points split between (0,0) and (10,10) with bounded noise."""
    a = np.zeros((10, 2)) + rng.uniform(-jitter, jitter, size=(10, 2))
    b = np.full((10, 2), 10.0) + rng.uniform(-jitter, jitter, size=(10, 2))
    return np.concatenate([a, b])


def bruteforce_two_partition(vectors):
    """Exhaustive optimal 2-clustering (small instances only)."""
    n = len(vectors)
    best = None
    for bits in range(1, 2 ** (n - 1)):
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        if mask.all() or not mask.any():
            continue
        centers = np.stack([vectors[~mask].mean(axis=0), vectors[mask].mean(axis=0)])
        obj = wss(vectors, centers, mask.astype(int))
        if best is None or obj < best[0]:
            best = (obj, centers)
    return best


# ---------------------------------------------------------------------------
# lloyd_kmeans / mine_patterns
# ---------------------------------------------------------------------------

class TestKMeans:

    def test_k1_is_mean(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(50, 6))
        centers, labels, _ = lloyd_kmeans(vectors, k=1, seed=0)
        assert centers.shape == (1, 6)
        assert np.allclose(centers[0], vectors.mean(axis=0))
        assert (labels == 0).all()

    def test_two_clusters_recovered(self):
        vectors = two_cluster_instance(np.random.default_rng(1))
        centers, _, _ = lloyd_kmeans(vectors, k=2, seed=0)
        centers = centers[np.argsort(centers[:, 0])]
        assert np.abs(centers[0] - [0.0, 0.0]).max() <= 0.02
        assert np.abs(centers[1] - [10.0, 10.0]).max() <= 0.02

    def test_fewer_points_than_clusters(self):
        vectors = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        patterns = mine_patterns(vectors, pattern_count=8, seed=0)
        assert len(patterns) == 3
        rows = {tuple(patterns.vector(i)) for i in range(3)}
        assert rows == {tuple(v) for v in vectors}

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            vectors = rng.normal(size=(int(rng.integers(20, 120)), int(rng.integers(2, 8))))
            k = int(rng.integers(2, 9))
            centers, labels, history = lloyd_kmeans(vectors, k, seed=trial)
            assert (np.diff(history) <= 1e-12).all()
            single = wss(vectors, vectors.mean(axis=0, keepdims=True), np.zeros(len(vectors), dtype=int))
            assert history[-1] <= single + 1e-9
            assert history[-1] == pytest.approx(wss(vectors, centers, labels), rel=1e-12, abs=1e-12)

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(3)
        vectors = rng.normal(size=(80, 4))
        a = lloyd_kmeans(vectors, 5, seed=9)
        b = lloyd_kmeans(vectors, 5, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_empty_is_usage_error(self):
        with pytest.raises(UsageError):
            mine_patterns(np.empty((0, 4)), pattern_count=2, seed=0)

    def test_origin_tags(self):
        vectors = np.random.default_rng(4).normal(size=(30, 3))
        patterns = mine_patterns(vectors, pattern_count=4, seed=0)
        assert all(patterns.origin(i) == ORIGIN_PREFILL for i in range(len(patterns)))


# ---------------------------------------------------------------------------
# midrange_center
# ---------------------------------------------------------------------------

class TestMidrangeCenter:

    def test_rectangle(self):
        assert np.array_equal(midrange_center(np.array([[0.0, 4.0], [2.0, 2.0]])), [1.0, 3.0])

    def test_single_row(self):
        row = np.array([[3.5, -2.0, 0.0]])
        assert np.array_equal(midrange_center(row), row[0])

    def test_symmetric_pair(self):
        assert np.array_equal(midrange_center(np.array([[-1.0, 0.0], [1.0, 0.0]])), [0.0, 0.0])

    def test_empty_window(self):
        with pytest.raises(UsageError):
            midrange_center(np.empty((0, 3)))

    def test_minimizes_max_deviation(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            window = rng.normal(size=(int(rng.integers(1, 20)), int(rng.integers(1, 8))))
            center = midrange_center(window)
            best = np.abs(window - center).max(axis=0)
            for _ in range(20):
                alt = center + rng.normal(size=window.shape[1])
                assert (best <= np.abs(window - alt).max(axis=0) + 1e-12).all()


# ---------------------------------------------------------------------------
# minmax_distance / match_pattern
# ---------------------------------------------------------------------------

class TestMatching:

    def test_distance_values(self):
        assert minmax_distance(np.array([1.0, 2.0, 3.0]), np.zeros(3)) == 2.0
        x = np.array([4.0, -1.0])
        assert minmax_distance(x, x) == 0.0
        assert minmax_distance(np.array([5.0, 1.0]), np.array([1.0, 1.0])) == 4.0

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            minmax_distance(np.zeros(3), np.zeros(4))

    def test_shift_covariance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            x = rng.normal(size=10)
            m = rng.normal(size=10)
            c = float(rng.normal() * 100)
            base = minmax_distance(x, m)
            assert minmax_distance(x + c, m) == pytest.approx(base, rel=1e-9, abs=1e-9 * max(1.0, abs(c)))

    def test_exact_match_wins(self):
        patterns = PatternSet(2)
        patterns.append(np.array([0.0, 5.0]), ORIGIN_PREFILL)
        patterns.append(np.array([1.0, 1.0]), ORIGIN_PREFILL)
        match = match_pattern(np.array([1.0, 1.0]), patterns)
        assert match.pattern_index == 1
        assert np.array_equal(match.residual, [0.0, 0.0])
        assert match.distance == 0.0

    def test_constant_offset_ties_with_exact_match(self):
        # the distance is shift-invariant, so a pattern differing from x
        # by a constant vector is exactly as good as x itself; the
        # lowest index wins and reconstruction is still exact
        patterns = PatternSet(2)
        patterns.append(np.array([0.0, 0.0]), ORIGIN_PREFILL)
        patterns.append(np.array([1.0, 1.0]), ORIGIN_PREFILL)
        match = match_pattern(np.array([1.0, 1.0]), patterns)
        assert match.pattern_index == 0
        assert match.distance == 0.0
        assert np.array_equal(match.residual, [1.0, 1.0])
        assert np.array_equal(
            reconstruct_vector(match.pattern_index, patterns, match.residual), [1.0, 1.0]
        )

    def test_tie_breaks_to_lowest_index(self):
        patterns = PatternSet(2)
        patterns.append(np.array([0.0, 0.0]), ORIGIN_PREFILL)
        patterns.append(np.array([2.0, 2.0]), ORIGIN_PREFILL)
        match = match_pattern(np.array([2.0, 0.0]), patterns)
        assert match.distance == 2.0
        assert match.pattern_index == 0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        patterns = PatternSet(5)
        for _ in range(8):
            patterns.append(rng.normal(size=5), ORIGIN_PREFILL)
        for _ in range(100):
            x = rng.normal(size=5)
            match = match_pattern(x, patterns)
            dists = [minmax_distance(x, patterns.vector(i)) for i in range(8)]
            assert match.pattern_index == int(np.argmin(dists))
            assert match.distance == min(dists)
            for d in dists:
                assert match.distance <= d

    def test_empty_set_is_usage_error(self):
        with pytest.raises(UsageError):
            match_pattern(np.zeros(2), PatternSet(2))

    def test_match_many_equals_loop(self):
        rng = np.random.default_rng(8)
        patterns = PatternSet(4)
        for _ in range(6):
            patterns.append(rng.normal(size=4), ORIGIN_PREFILL)
        xs = rng.normal(size=(40, 4))
        idx, residuals, dists = match_many(xs, patterns)
        for i, x in enumerate(xs):
            single = match_pattern(x, patterns)
            assert idx[i] == single.pattern_index
            assert np.array_equal(residuals[i], single.residual)
            assert dists[i] == single.distance


# ---------------------------------------------------------------------------
# reconstruct_vector / PatternSet bookkeeping
# ---------------------------------------------------------------------------

class TestReconstruct:

    def test_addition(self):
        patterns = PatternSet(2)
        patterns.append(np.array([1.0, 3.0]), ORIGIN_PREFILL)
        assert np.array_equal(reconstruct_vector(0, patterns, np.array([0.0, 1.0])), [1.0, 4.0])
        assert np.array_equal(reconstruct_vector(0, patterns, np.zeros(2)), [1.0, 3.0])

    def test_stale_index_is_data_error(self):
        patterns = PatternSet(2)
        patterns.append(np.zeros(2), ORIGIN_PREFILL)
        with pytest.raises(DataError):
            reconstruct_vector(3, patterns, np.zeros(2))

    def test_full_chain_8bit(self):
        rng = np.random.default_rng(9)
        patterns = PatternSet(16)
        for _ in range(8):
            patterns.append(rng.normal(size=16), ORIGIN_PREFILL)
        for _ in range(50):
            x = rng.normal(size=16)
            match = match_pattern(x, patterns)
            group = quantize_group(match.residual, bits=8)
            out = reconstruct_vector(match.pattern_index, patterns, dequantize_group(group))
            bound = group.params.scale / 2 + 1e-12
            assert np.abs(out - x).max() <= bound

    def test_append_only_indices(self):
        patterns = PatternSet(3)
        first = patterns.append(np.ones(3), ORIGIN_PREFILL)
        vec = patterns.vector(first).copy()
        for i in range(5):
            assert patterns.append(np.full(3, float(i)), ORIGIN_DECODE) == i + 1
        assert np.array_equal(patterns.vector(first), vec)
        assert patterns.origin(5) == ORIGIN_DECODE

    def test_dimension_enforced(self):
        patterns = PatternSet(3)
        with pytest.raises(UsageError):
            patterns.append(np.zeros(4), ORIGIN_PREFILL)


# ---------------------------------------------------------------------------
# Optimal two-partition agreement (reduced instance)
# ---------------------------------------------------------------------------

def test_kmeans_matches_bruteforce_on_reduced_instance():
    rng = np.random.default_rng(10)
    vectors = np.concatenate(
        [rng.uniform(-0.01, 0.01, size=(4, 2)), 10.0 + rng.uniform(-0.01, 0.01, size=(4, 2))]
    )
    best_obj, best_centers = bruteforce_two_partition(vectors)
    centers, labels, history = lloyd_kmeans(vectors, 2, seed=0)
    assert history[-1] == pytest.approx(best_obj, rel=1e-9, abs=1e-12)
    got = centers[np.argsort(centers[:, 0])]
    want = best_centers[np.argsort(best_centers[:, 0])]
    assert np.abs(got - want).max() <= 1e-9
