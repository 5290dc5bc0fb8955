"""Tests for variance decomposition, consistency, covering bounds,
memory accounting and the synthetic stream generator."""

import math

import numpy as np
import pytest

from patternkv.analysis import (
    DEFAULT_STREAM_SPEC,
    KeyModel,
    SyntheticStreamSpec,
    ValueModel,
    bits_per_token,
    channel_statistics,
    consistency_metric,
    covering_bound_check,
    fp16_reference_bits_per_token,
    generate_synthetic_stream,
    outlier_channels,
    parse_stream_spec,
    variance_decomposition,
)
from patternkv.engine import EngineConfig
from patternkv.errors import UsageError


# ---------------------------------------------------------------------------
# variance_decomposition
# ---------------------------------------------------------------------------

class TestVarianceDecomposition:

    def test_hand_computed_partition(self):
        vectors = np.array([[0.0], [2.0], [10.0], [12.0]])
        assignment = np.array([0, 0, 1, 1])
        report = variance_decomposition(vectors, assignment)
        assert report.total_sum == pytest.approx(26.0)
        assert report.intra_sum == pytest.approx(1.0)
        assert report.inter_sum == pytest.approx(25.0)

    def test_single_group(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(30, 3))
        report = variance_decomposition(vectors, np.zeros(30, dtype=int))
        assert report.inter_sum == pytest.approx(0.0, abs=1e-12)
        assert report.intra_sum == pytest.approx(report.total_sum, rel=1e-12)

    def test_singleton_groups(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(20, 4))
        report = variance_decomposition(vectors, np.arange(20))
        assert report.intra_sum == pytest.approx(0.0, abs=1e-12)
        assert report.inter_sum == pytest.approx(report.total_sum, rel=1e-12)

    def test_identity_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 200))
            d = int(rng.integers(1, 8))
            k = int(rng.integers(1, 12))
            vectors = rng.normal(size=(n, d)) * 10 ** rng.uniform(-3, 3)
            assignment = rng.integers(0, k, size=n)
            report = variance_decomposition(vectors, assignment)
            lhs = report.total_sum
            rhs = report.intra_sum + report.inter_sum
            assert abs(lhs - rhs) <= 1e-9 * max(lhs, 1e-300)
            assert np.allclose(report.total, report.intra + report.inter, rtol=1e-9, atol=0)

    def test_bad_assignment(self):
        vectors = np.zeros((3, 2))
        with pytest.raises(UsageError):
            variance_decomposition(vectors, np.array([0, 1, -1]))
        with pytest.raises(UsageError):
            variance_decomposition(vectors, np.array([0.5, 1.0, 0.0]))


# ---------------------------------------------------------------------------
# consistency_metric
# ---------------------------------------------------------------------------

class TestConsistencyMetric:

    def test_perfectly_consistent_token(self):
        report = consistency_metric(np.array([7, 7, 7, 7]), np.array([2, 2, 2, 2]))
        assert report.per_token[7] == 1.0
        assert report.aggregate == 1.0

    def test_majority_share(self):
        report = consistency_metric(np.array([5, 5, 5, 5]), np.array([1, 1, 1, 3]))
        assert report.per_token[5] == pytest.approx(0.75)

    def test_uniform_spread(self):
        ids = np.array([1] * 8)
        clusters = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        report = consistency_metric(ids, clusters)
        assert report.per_token[1] == pytest.approx(0.25)

    def test_single_occurrences_excluded(self):
        report = consistency_metric(np.array([1, 2, 3, 1]), np.array([0, 1, 2, 0]))
        assert set(report.per_token) == {1}
        assert report.aggregate == 1.0

    def test_no_repeats_gives_nan_aggregate(self):
        report = consistency_metric(np.array([1, 2, 3]), np.array([0, 0, 0]))
        assert report.per_token == {}
        assert math.isnan(report.aggregate)

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            consistency_metric(np.array([1, 2]), np.array([0]))


# ---------------------------------------------------------------------------
# covering_bound_check
# ---------------------------------------------------------------------------

class TestCoveringBound:

    def test_square_vertices(self):
        pts = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
        report = covering_bound_check(pts, rho=0.5, bits=2)
        assert report.r_w_star == pytest.approx(1.0)
        assert report.epsilon == pytest.approx(0.5)
        assert report.bound_holds
        assert report.u_res <= 0.5 * report.u_raw

    def test_single_point(self):
        report = covering_bound_check(np.array([[3.0, -2.0, 7.0]]), rho=0.5, bits=2)
        assert report.r_w_star == 0.0
        assert report.u_raw == 0.0 and report.u_res == 0.0
        assert report.bound_holds
        assert report.epsilon_net_size == 1

    def test_uniform_cube(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.0, 1.0, size=(500, 3))
        report = covering_bound_check(pts, rho=0.5, bits=2)
        assert report.bound_holds
        assert report.epsilon_net_size <= 27
        assert report.epsilon_net_size <= report.net_size_estimate

    def test_diagonal_set(self):
        # every point is a constant vector: zero width, trivial bound
        pts = np.outer(np.arange(5.0), np.ones(3))
        report = covering_bound_check(pts, rho=0.25, bits=4)
        assert report.r_w_star == 0.0
        assert report.bound_holds
        assert report.epsilon_net_size == 5

    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.5, 2.0])
    def test_rho_range(self, rho):
        with pytest.raises(UsageError):
            covering_bound_check(np.zeros((3, 2)), rho=rho, bits=2)

    def test_random_sets_always_hold(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            n = int(rng.integers(1, 300))
            d = int(rng.integers(1, 5))
            pts = rng.normal(size=(n, d)) * 10 ** rng.uniform(-2, 2)
            for rho in (0.25, 0.5, 0.75):
                report = covering_bound_check(pts, rho=rho, bits=2)
                assert report.bound_holds
                assert report.epsilon_net_size <= max(report.net_size_estimate, report.epsilon_net_size)


# ---------------------------------------------------------------------------
# bits_per_token
# ---------------------------------------------------------------------------

class TestBitsPerToken:

    def test_fp16_reference(self):
        assert fp16_reference_bits_per_token(128) == 2048.0
        assert fp16_reference_bits_per_token(1) == 16.0

    def test_reference_configuration(self):
        config = EngineConfig(bits=2, pattern_count=32)
        got = bits_per_token(config, head_dim=128, pattern_set_size=32, token_count=4096, side="v")
        # 256 code bits + 32 param bits + 16 index bits + amortized patterns
        assert got == 2 * 128 + 32 + 16 + 16 * 128 * 32 / 4096

    def test_per_channel_params_amortized(self):
        config = EngineConfig(bits=2, pattern_count=32, group_size=128)
        got = bits_per_token(config, head_dim=128, pattern_set_size=0, token_count=4096, side="k")
        assert got == 2 * 128 + 32 * 128 / 128 + 16

    def test_no_patterns_drops_index(self):
        config = EngineConfig(bits=2, use_v_patterns=False)
        got = bits_per_token(config, head_dim=64, pattern_set_size=0, token_count=1000, side="v")
        assert got == 2 * 64 + 32

    def test_monotone_in_bits(self):
        vals = [
            bits_per_token(EngineConfig(bits=b), 64, 32, 4096, "v")
            for b in (2, 4, 8)
        ]
        assert vals[0] < vals[1] < vals[2]

    def test_amortization_decreases_with_tokens(self):
        config = EngineConfig(bits=2)
        a = bits_per_token(config, 64, 32, 1024, "v")
        b = bits_per_token(config, 64, 32, 2048, "v")
        assert b < a

    def test_side_validation(self):
        with pytest.raises(UsageError):
            bits_per_token(EngineConfig(), 64, 0, 100, side="q")


# ---------------------------------------------------------------------------
# Synthetic stream generator
# ---------------------------------------------------------------------------

class TestSyntheticStream:

    def test_deterministic(self):
        a = generate_synthetic_stream(DEFAULT_STREAM_SPEC)
        b = generate_synthetic_stream(DEFAULT_STREAM_SPEC)
        assert np.array_equal(a.prefill_k, b.prefill_k)
        assert np.array_equal(a.decode_v, b.decode_v)
        assert np.array_equal(a.token_ids, b.token_ids)

    def test_frozen_keys_without_drift_or_noise(self):
        spec = SyntheticStreamSpec(
            layers=1, heads=2, head_dim=8, prefill_len=16, decode_len=8,
            k_model=KeyModel(drift_rate=0.0, noise_std=0.0),
        )
        stream = generate_synthetic_stream(spec)
        keys = np.concatenate([stream.prefill_k, stream.decode_k], axis=2)
        for head in range(2):
            rows = keys[0, head]
            assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_outlier_channel_dominates(self):
        spec = SyntheticStreamSpec(
            layers=1, heads=1, head_dim=16, prefill_len=256, decode_len=0,
            k_model=KeyModel(outlier_channels=(7,), outlier_multipliers=(100.0,), noise_std=0.01),
        )
        stream = generate_synthetic_stream(spec)
        stats = channel_statistics(stream)[0]
        assert stats["mean_abs"][7] >= 50.0 * stats["median_mean_abs"]
        assert outlier_channels(stats, threshold=5.0) == [7]

    def test_full_consistency(self):
        spec = SyntheticStreamSpec(
            layers=1, heads=1, head_dim=8, prefill_len=128, decode_len=128,
            v_model=ValueModel(cluster_count=4, consistency=1.0, vocab_size=16),
        )
        stream = generate_synthetic_stream(spec)
        report = consistency_metric(stream.token_ids, stream.v_cluster_ids[0, 0])
        assert report.aggregate == 1.0

    def test_low_consistency_spreads_clusters(self):
        spec = SyntheticStreamSpec(
            layers=1, heads=1, head_dim=8, prefill_len=512, decode_len=512,
            v_model=ValueModel(cluster_count=8, consistency=0.0, vocab_size=8),
        )
        stream = generate_synthetic_stream(spec)
        report = consistency_metric(stream.token_ids, stream.v_cluster_ids[0, 0])
        assert report.aggregate < 0.6

    def test_invalid_consistency(self):
        with pytest.raises(UsageError):
            generate_synthetic_stream(
                SyntheticStreamSpec(v_model=ValueModel(consistency=1.5))
            )

    def test_invalid_outlier_channel(self):
        with pytest.raises(UsageError):
            generate_synthetic_stream(
                SyntheticStreamSpec(head_dim=4, k_model=KeyModel(outlier_channels=(9,), outlier_multipliers=(2.0,)))
            )

    def test_shapes(self):
        spec = SyntheticStreamSpec(layers=3, heads=2, head_dim=8, prefill_len=20, decode_len=5)
        stream = generate_synthetic_stream(spec)
        assert stream.prefill_k.shape == (3, 2, 20, 8)
        assert stream.decode_v.shape == (3, 2, 5, 8)
        assert stream.token_ids.shape == (25,)


# ---------------------------------------------------------------------------
# Spec file parsing
# ---------------------------------------------------------------------------

SPEC_TEXT = """
# synthetic stream description
layers = 2
heads = 1
head_dim = 32
prefill_len = 64
decode_len = 16
seed = 11

k_outlier_channels = 3, 9
k_outlier_multipliers = 20.0, 40.0
k_drift_rate = 0.001
k_noise_std = 0.02

v_clusters = 5
v_center_spread = 4.0
v_within_std = 0.1
v_consistency = 0.8
v_vocab_size = 32
"""


class TestSpecParsing:

    def test_full_document(self):
        spec = parse_stream_spec(SPEC_TEXT)
        assert spec.layers == 2
        assert spec.head_dim == 32
        assert spec.seed == 11
        assert spec.k_model.outlier_channels == (3, 9)
        assert spec.k_model.outlier_multipliers == (20.0, 40.0)
        assert spec.v_model.cluster_count == 5
        assert spec.v_model.consistency == pytest.approx(0.8)
        stream = generate_synthetic_stream(spec)
        assert stream.prefill_k.shape == (2, 1, 64, 32)

    def test_defaults_fill_missing_keys(self):
        spec = parse_stream_spec("layers = 3\n")
        assert spec.layers == 3
        assert spec.head_dim == SyntheticStreamSpec().head_dim

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="line 2"):
            parse_stream_spec("layers = 1\nwidgets = 9\n")

    def test_bad_value(self):
        with pytest.raises(UsageError, match="line 1"):
            parse_stream_spec("layers = banana\n")

    def test_missing_equals(self):
        with pytest.raises(UsageError, match="line 1"):
            parse_stream_spec("layers 4\n")

    def test_validation_applies(self):
        with pytest.raises(UsageError):
            parse_stream_spec("v_consistency = 2.0\n")
