"""Tests for the per-head cache engine lifecycle and scheme comparison."""

import numpy as np
import pytest

from patternkv.analysis import (
    KeyModel,
    SyntheticStreamSpec,
    ValueModel,
    bits_per_token,
    generate_synthetic_stream,
)
from patternkv.engine import (
    RAW_MARKER,
    EngineConfig,
    accounted_bits_per_token,
    append_decode_token,
    committed_matrices,
    prefill,
    reconstruct_token,
    replay_head,
    run_scheme_comparison,
)
from patternkv.errors import DataError, UsageError
from patternkv.gate import contraction_threshold
from patternkv.quant import dequantize_group, quantize_group
from patternkv.stream import KvStream


def head_data(rng, tokens, dim):
    return rng.normal(size=(tokens, dim)), rng.normal(size=(tokens, dim))


def clustered_stream(seed=0, layers=1, heads=1, dim=64, prefill_len=512, decode_len=512,
                     spread=10.0, within=0.1, clusters=8):
    spec = SyntheticStreamSpec(
        layers=layers, heads=heads, head_dim=dim,
        prefill_len=prefill_len, decode_len=decode_len,
        k_model=KeyModel(outlier_channels=(3,), outlier_multipliers=(32.0,), drift_rate=1e-3, noise_std=0.05),
        v_model=ValueModel(cluster_count=clusters, center_spread=spread, within_std=within, consistency=1.0),
        seed=seed,
    )
    return generate_synthetic_stream(spec)


# ---------------------------------------------------------------------------
# EngineConfig validation
# ---------------------------------------------------------------------------

class TestEngineConfig:

    def test_defaults_match_contract(self):
        config = EngineConfig()
        assert config.bits == 2
        assert config.pattern_count == 32
        assert config.group_size == 128
        assert config.residual_window == 128
        assert config.use_k_patterns and config.use_v_patterns
        assert config.generate_new_patterns and config.use_v_gate
        assert not config.use_k_gate

    def test_invalid_values(self):
        with pytest.raises(UsageError):
            EngineConfig(bits=3)
        with pytest.raises(UsageError):
            EngineConfig(pattern_count=0)
        with pytest.raises(UsageError):
            EngineConfig(group_size=0)
        with pytest.raises(UsageError):
            EngineConfig(group_size=64, residual_window=32)
        with pytest.raises(UsageError):
            EngineConfig(alpha=0.0)

    def test_raw_variant(self):
        raw = EngineConfig(bits=4, group_size=64, residual_window=64).raw_variant()
        assert raw.is_raw
        assert raw.bits == 4 and raw.group_size == 64
        assert not EngineConfig().is_raw


# ---------------------------------------------------------------------------
# prefill
# ---------------------------------------------------------------------------

class TestPrefill:

    def test_short_prefill_stays_in_window(self):
        rng = np.random.default_rng(0)
        k, v = head_data(rng, 100, 16)
        config = EngineConfig(pattern_count=8, group_size=128, residual_window=128)
        state = prefill(k, v, config)
        assert state.committed_count == 0
        assert len(state.window_k) == 100
        assert len(state.k_patterns) == 8
        assert len(state.v_patterns) == 8
        for t in range(100):
            rk, rv = reconstruct_token(state, t)
            assert np.array_equal(rk, k[t])
            assert np.array_equal(rv, v[t])

    def test_default_geometry_commits_one_block(self):
        rng = np.random.default_rng(1)
        k, v = head_data(rng, 256, 32)
        state = prefill(k, v, EngineConfig(pattern_count=8))
        assert state.committed_count == 128
        assert len(state.k_blocks) == 1
        assert state.k_blocks[0].length == 128
        assert len(state.v_tokens) == 128
        assert len(state.window_k) == 128

    def test_short_final_block_allowed(self):
        rng = np.random.default_rng(2)
        k, v = head_data(rng, 300, 8)
        state = prefill(k, v, EngineConfig(pattern_count=4, group_size=128, residual_window=128))
        # 172 committed tokens: one full block of 128 plus a 44-token tail
        assert state.committed_count == 172
        assert [b.length for b in state.k_blocks] == [128, 44]

    def test_exact_pattern_vectors_reconstruct_exactly(self):
        rng = np.random.default_rng(3)
        centers = rng.normal(size=(4, 8)) * 5
        idx = rng.integers(0, 4, size=64)
        k = centers[idx]
        v = centers[idx]
        config = EngineConfig(pattern_count=4, group_size=16, residual_window=16, seed=0)
        state = prefill(k, v, config)
        assert state.committed_count == 48
        rk, rv = committed_matrices(state)
        assert np.abs(rk - k[:48]).max() == 0.0
        assert np.abs(rv - v[:48]).max() == 0.0

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(UsageError):
            prefill(rng.normal(size=(10, 4)), rng.normal(size=(10, 5)), EngineConfig(group_size=4, residual_window=4))

    def test_non_finite_rejected(self):
        k = np.zeros((10, 4))
        v = np.zeros((10, 4))
        v[3, 1] = np.inf
        with pytest.raises(DataError, match="token 3"):
            prefill(k, v, EngineConfig(group_size=4, residual_window=4, pattern_count=2))


# ---------------------------------------------------------------------------
# append_decode_token
# ---------------------------------------------------------------------------

class TestDecodeAppend:

    def make_state(self, rng, dim=8):
        config = EngineConfig(pattern_count=4, group_size=32, residual_window=32, bits=4)
        k, v = head_data(rng, 64, dim)
        return prefill(k, v, config)

    def test_no_flush_below_threshold(self):
        rng = np.random.default_rng(5)
        state = self.make_state(rng)
        blocks = len(state.k_blocks)
        for _ in range(31):
            append_decode_token(rng.normal(size=8), rng.normal(size=8), state)
        assert len(state.k_blocks) == blocks
        assert len(state.window_k) == 63

    def test_flush_on_filling_append(self):
        rng = np.random.default_rng(6)
        state = self.make_state(rng)
        k_pat, v_pat = len(state.k_patterns), len(state.v_patterns)
        committed = state.committed_count
        for _ in range(32):
            append_decode_token(rng.normal(size=8), rng.normal(size=8), state)
        assert state.committed_count == committed + 32
        assert len(state.window_k) == 32
        assert len(state.k_patterns) == k_pat + 1
        assert len(state.v_patterns) == v_pat + 1
        assert state.k_patterns.origin(len(state.k_patterns) - 1) == "decode"

    def test_conservation(self):
        rng = np.random.default_rng(7)
        state = self.make_state(rng)
        for extra in range(1, 101):
            append_decode_token(rng.normal(size=8), rng.normal(size=8), state)
            assert state.token_count == 64 + extra
            assert state.committed_count + len(state.window_k) == state.token_count

    def test_pattern_growth_is_one_per_flush(self):
        rng = np.random.default_rng(8)
        state = self.make_state(rng)
        base = len(state.k_patterns)
        appends = 300
        for _ in range(appends):
            append_decode_token(rng.normal(size=8), rng.normal(size=8), state)
        flushes = (len(state.window_k) + appends - 32) // 32
        assert len(state.k_patterns) == base + flushes
        assert len(state.v_patterns) == base + flushes

    def test_no_new_patterns_toggle(self):
        rng = np.random.default_rng(9)
        config = EngineConfig(pattern_count=4, group_size=16, residual_window=16, generate_new_patterns=False)
        k, v = head_data(rng, 32, 8)
        state = prefill(k, v, config)
        for _ in range(64):
            append_decode_token(rng.normal(size=8), rng.normal(size=8), state)
        assert len(state.k_patterns) == 4
        assert len(state.v_patterns) == 4

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(10)
        state = self.make_state(rng)
        with pytest.raises(UsageError):
            append_decode_token(np.zeros(9), np.zeros(8), state)

    def test_non_finite_rejected(self):
        rng = np.random.default_rng(11)
        state = self.make_state(rng)
        bad = np.zeros(8)
        bad[2] = np.nan
        with pytest.raises(DataError):
            append_decode_token(bad, np.zeros(8), state)


# ---------------------------------------------------------------------------
# reconstruct_token
# ---------------------------------------------------------------------------

class TestReconstruct:

    def test_window_tokens_exact(self):
        rng = np.random.default_rng(12)
        k, v = head_data(rng, 40, 8)
        config = EngineConfig(pattern_count=4, group_size=16, residual_window=16)
        state = prefill(k, v, config)
        for t in range(24, 40):
            rk, rv = reconstruct_token(state, t)
            assert np.array_equal(rk, k[t])
            assert np.array_equal(rv, v[t])

    def test_committed_eight_bit_error_bound(self):
        rng = np.random.default_rng(13)
        k, v = head_data(rng, 64, 8)
        config = EngineConfig(bits=8, pattern_count=4, group_size=16, residual_window=16)
        state = prefill(k, v, config)
        for block in state.k_blocks:
            recon = np.stack(
                [reconstruct_token(state, block.start_token + i)[0] for i in range(block.length)]
            )
            for c, group in enumerate(block.channel_groups):
                err = np.abs(recon[:, c] - k[block.start_token : block.start_token + block.length, c])
                # pattern addition can only re-shift the channel values
                assert err.max() <= group.params.scale / 2 + 1e-9

    def test_gated_off_token_equals_plain_quantization(self):
        rng = np.random.default_rng(14)
        dim = 16
        config = EngineConfig(bits=2, pattern_count=2, group_size=8, residual_window=8)
        k, _ = head_data(rng, 32, dim)
        # values sit in tight clusters; decode vectors far from both
        # patterns keep raw ranges tiny so the gate refuses to flatten
        v = np.where(rng.uniform(size=(32, dim)) < 0.5, 100.0, -100.0)
        state = prefill(k, v, config)
        raw_tokens = [t for t in state.v_tokens if t.pattern_index == RAW_MARKER]
        assert raw_tokens, "expected at least one gated-off token"
        for token in raw_tokens:
            expect = dequantize_group(quantize_group(v[token.token_index], config.bits))
            got = reconstruct_token(state, token.token_index)[1]
            assert np.array_equal(got, expect)

    def test_out_of_range_index(self):
        rng = np.random.default_rng(15)
        k, v = head_data(rng, 10, 4)
        state = prefill(k, v, EngineConfig(pattern_count=2, group_size=4, residual_window=4))
        with pytest.raises(UsageError):
            reconstruct_token(state, 10)
        with pytest.raises(UsageError):
            reconstruct_token(state, -1)


# ---------------------------------------------------------------------------
# Gate safety on recorded decisions
# ---------------------------------------------------------------------------

def test_recorded_flatten_decisions_respect_threshold():
    stream = clustered_stream(seed=16, prefill_len=256, decode_len=256)
    kp, vp, kd, vd = stream.head_slices(0, 0)
    config = EngineConfig(bits=2, pattern_count=8)
    state = replay_head(kp, vp, kd, vd, config)
    threshold = contraction_threshold(stream.head_dim, config.alpha)
    assert state.v_decisions
    for decision in state.v_decisions:
        if decision.flatten:
            assert decision.flat_range <= threshold * decision.raw_range * (1 + 1e-12)
        else:
            assert decision.flat_range > threshold * decision.raw_range * (1 - 1e-12)


# ---------------------------------------------------------------------------
# Ablation coherence and determinism
# ---------------------------------------------------------------------------

class TestAblationCoherence:

    def test_all_toggles_off_is_bit_identical_to_raw(self):
        rng = np.random.default_rng(17)
        k, v = head_data(rng, 200, 16)
        kd, vd = head_data(rng, 100, 16)
        base = EngineConfig(bits=2, group_size=32, residual_window=32)
        ablated = EngineConfig(
            bits=2, group_size=32, residual_window=32,
            use_k_patterns=False, use_v_patterns=False, generate_new_patterns=False,
        )
        s_raw = replay_head(k, v, kd, vd, base.raw_variant())
        s_abl = replay_head(k, v, kd, vd, ablated)
        mk0, mv0 = committed_matrices(s_raw)
        mk1, mv1 = committed_matrices(s_abl)
        assert np.array_equal(mk0, mk1)
        assert np.array_equal(mv0, mv1)
        for t in range(s_raw.token_count):
            a = reconstruct_token(s_raw, t)
            b = reconstruct_token(s_abl, t)
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_replay_is_deterministic(self):
        stream = clustered_stream(seed=18, prefill_len=256, decode_len=128)
        kp, vp, kd, vd = stream.head_slices(0, 0)
        config = EngineConfig(bits=2, pattern_count=8)
        a = replay_head(kp, vp, kd, vd, config)
        b = replay_head(kp, vp, kd, vd, config)
        ma, mb = committed_matrices(a), committed_matrices(b)
        assert np.array_equal(ma[0], mb[0]) and np.array_equal(ma[1], mb[1])
        assert [d.flatten for d in a.v_decisions] == [d.flatten for d in b.v_decisions]


# ---------------------------------------------------------------------------
# run_scheme_comparison
# ---------------------------------------------------------------------------

class TestSchemeComparison:

    def test_duplicate_config_gives_identical_metrics(self):
        stream = clustered_stream(seed=19, prefill_len=256, decode_len=128)
        config = EngineConfig(bits=2, pattern_count=8)
        results = run_scheme_comparison(stream, [("a", config), ("b", config)])
        a = next(m for m in results if m.scheme == "a")
        b = next(m for m in results if m.scheme == "b")
        assert a.mse == b.mse
        assert a.k_mse == b.k_mse and a.v_mse == b.v_mse
        assert a.bits_per_token == b.bits_per_token
        assert np.array_equal(a.ratios, b.ratios)

    def test_raw_baseline_always_included(self):
        stream = clustered_stream(seed=20, prefill_len=256, decode_len=64)
        results = run_scheme_comparison(stream, [("patternkv", EngineConfig(pattern_count=8))])
        assert [m.scheme for m in results][0] == "raw"
        assert results[0].config.is_raw

    def test_raw_name_must_be_raw(self):
        stream = clustered_stream(seed=21, prefill_len=256, decode_len=0)
        with pytest.raises(UsageError):
            run_scheme_comparison(stream, [("raw", EngineConfig())])

    def test_empty_scheme_list(self):
        stream = clustered_stream(seed=22, prefill_len=256, decode_len=0)
        with pytest.raises(UsageError):
            run_scheme_comparison(stream, [])

    def test_clustered_stream_beats_raw_at_two_bits(self):
        stream = clustered_stream(seed=23)
        results = run_scheme_comparison(stream, [("patternkv", EngineConfig(bits=2, pattern_count=32))])
        raw = next(m for m in results if m.scheme == "raw")
        pkv = next(m for m in results if m.scheme == "patternkv")
        assert pkv.mse < 0.5 * raw.mse
        assert pkv.v_gate_acceptance_rate > 0.9

    def test_eight_bit_error_floor_both_schemes(self):
        stream = clustered_stream(seed=24, prefill_len=256, decode_len=128)
        results = run_scheme_comparison(stream, [("patternkv", EngineConfig(bits=8, pattern_count=8))])
        for metrics in results:
            # every group spans at most the observed stream range, so the
            # per-element bound (range/255)^2/4 caps the mse
            all_vals = np.concatenate(
                [stream.prefill_k.ravel(), stream.prefill_v.ravel(), stream.decode_k.ravel(), stream.decode_v.ravel()]
            )
            spread = all_vals.max() - all_vals.min()
            assert metrics.mse <= (spread / 255.0) ** 2 / 4.0

    def test_gate_acceptance_between_zero_and_one(self):
        stream = clustered_stream(seed=25, prefill_len=256, decode_len=128)
        for metrics in run_scheme_comparison(stream, [("patternkv", EngineConfig(pattern_count=8))]):
            assert 0.0 <= metrics.v_gate_acceptance_rate <= 1.0


# ---------------------------------------------------------------------------
# Storage accounting against the closed form
# ---------------------------------------------------------------------------

def test_engine_accounting_matches_closed_form():
    # fully aligned: every committed block is exactly group_size long
    stream = clustered_stream(seed=26, dim=32, prefill_len=256, decode_len=256)
    kp, vp, kd, vd = stream.head_slices(0, 0)
    config = EngineConfig(bits=2, pattern_count=16, group_size=128, residual_window=128)
    state = replay_head(kp, vp, kd, vd, config)
    committed = state.committed_count
    assert committed % config.group_size == 0
    got_k = accounted_bits_per_token(state, "k")
    got_v = accounted_bits_per_token(state, "v")
    want_k = bits_per_token(config, 32, len(state.k_patterns), committed, side="k")
    want_v = bits_per_token(config, 32, len(state.v_patterns), committed, side="v")
    assert got_k == want_k
    assert got_v == want_v
