"""Randomized property suites behind the `verify` CLI command.

Each suite draws fresh instances from the given seed and reports one
result per property. Failures carry a reproducer string (seed plus
instance coordinates) so any violation can be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analysis, gate, patterns, quant

SUITE_NAMES = ("quant", "patterns", "gate", "variance", "covering")


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


def run_suite(suite: str, seed: int) -> list[CheckResult]:
    try:
        fn = _SUITES[suite]
    except KeyError:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITE_NAMES}") from None
    return fn(seed)


def _result(suite: str, name: str, failures: list[str], checked: int) -> CheckResult:
    if failures:
        return CheckResult(suite, name, False, f"{len(failures)} violation(s), first: {failures[0]}")
    return CheckResult(suite, name, True, f"{checked} instances")


def _quant_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    eps = np.finfo(np.float64).eps
    bound_fails: list[str] = []
    endpoint_fails: list[str] = []
    monotone_fails: list[str] = []
    pack_fails: list[str] = []
    n = 300
    for i in range(n):
        bits = int(rng.choice([2, 4, 8]))
        length = int(rng.integers(1, 65))
        scale = 10.0 ** rng.uniform(-3, 3)
        values = rng.normal(0.0, scale, size=length) + rng.uniform(-5, 5) * scale
        group = quant.quantize_group(values, bits)
        deq = quant.dequantize_group(group)
        spread = values.max() - values.min()
        bound = group.params.scale / 2 + 4 * eps * spread
        repro = f"seed={seed} instance={i} bits={bits} length={length}"
        if np.abs(deq - values).max() > bound:
            bound_fails.append(repro)
        if abs(deq[np.argmin(values)] - values.min()) > 2 * eps * max(spread, abs(values.min())):
            endpoint_fails.append(repro + " (min endpoint)")
        if abs(deq[np.argmax(values)] - values.max()) > 2 * eps * max(spread, abs(values.max())):
            endpoint_fails.append(repro + " (max endpoint)")
        order = np.argsort(values, kind="stable")
        codes = quant.unpack_codes(group.codes, group.length, bits)
        if np.any(np.diff(codes[order].astype(np.int64)) < 0):
            monotone_fails.append(repro)
        raw_codes = rng.integers(0, 1 << bits, size=length)
        packed = quant.pack_codes(raw_codes, bits)
        if len(packed) != (length * bits + 7) // 8 or not np.array_equal(
            quant.unpack_codes(packed, length, bits), raw_codes
        ):
            pack_fails.append(repro)
    return [
        _result("quant", "round_trip_error_bound", bound_fails, n),
        _result("quant", "endpoints_exact", endpoint_fails, n),
        _result("quant", "codes_monotone_in_value", monotone_fails, n),
        _result("quant", "pack_unpack_bijection", pack_fails, n),
    ]


def _patterns_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    objective_fails: list[str] = []
    midrange_fails: list[str] = []
    match_fails: list[str] = []
    shift_fails: list[str] = []
    n = 60
    for i in range(n):
        t = int(rng.integers(20, 120))
        d = int(rng.integers(2, 12))
        k = int(rng.integers(2, 9))
        pts = rng.normal(0.0, 1.0, size=(t, d)) + rng.normal(0.0, 3.0, size=(1, d))
        repro = f"seed={seed} instance={i} t={t} d={d} k={k}"

        _, _, history = patterns.lloyd_kmeans(pts, k, seed=i)
        single = float(((pts - pts.mean(axis=0)) ** 2).sum())
        if any(b > a * (1 + 1e-12) for a, b in zip(history, history[1:])):
            objective_fails.append(repro + " (history increased)")
        if history[-1] > single * (1 + 1e-12):
            objective_fails.append(repro + " (worse than one cluster)")

        window = rng.normal(0.0, 1.0, size=(int(rng.integers(2, 40)), d))
        center = patterns.midrange_center(window)
        best = np.abs(window - center).max(axis=0)
        for j in range(20):
            alt = center + rng.normal(0.0, 0.5, size=d)
            if np.any(np.abs(window - alt).max(axis=0) < best - 1e-12):
                midrange_fails.append(repro + f" (alternative {j} beat midrange)")
                break

        pset = patterns.PatternSet(d)
        for row in rng.normal(0.0, 1.0, size=(k, d)):
            pset.append(row, patterns.ORIGIN_PREFILL)
        x = rng.normal(0.0, 1.0, size=d)
        got = patterns.match_pattern(x, pset)
        dists = [patterns.minmax_distance(x, pset.vector(j)) for j in range(k)]
        want = int(np.argmin(dists))
        if got.pattern_index != want or abs(got.distance - dists[want]) > 1e-12:
            match_fails.append(repro)

        c = float(rng.uniform(-50, 50))
        shifted = patterns.PatternSet(d)
        for j in range(k):
            shifted.append(pset.vector(j) + c, patterns.ORIGIN_PREFILL)
        got_shift = patterns.match_pattern(x + c, shifted)
        if got_shift.pattern_index != got.pattern_index or np.abs(
            got_shift.residual - got.residual
        ).max() > 1e-9 * max(1.0, abs(c)):
            shift_fails.append(repro)
    return [
        _result("patterns", "kmeans_objective_monotone", objective_fails, n),
        _result("patterns", "midrange_center_optimal", midrange_fails, n),
        _result("patterns", "match_equals_bruteforce", match_fails, n),
        _result("patterns", "match_shift_covariant", shift_fails, n),
    ]


def _gate_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    equiv_fails: list[str] = []
    solve_fails: list[str] = []
    monotone_fails: list[str] = []
    zero_fails: list[str] = []
    n = 5000
    cfg = gate.GateConfig.create(head_dim=128, alpha=0.05)
    for i in range(n):
        raw = float(rng.uniform(1e-6, 10.0))
        flat = float(rng.uniform(0.0, 12.0))
        decision = gate.decide(raw, flat, cfg)
        mean, var = gate.expected_error_gain(raw, flat, bits=2, dim=cfg.head_dim)
        rejected = mean / math.sqrt(var) >= cfg.z
        if decision.flatten != rejected:
            equiv_fails.append(f"seed={seed} instance={i} raw={raw!r} flat={flat!r}")
    for i in range(50):
        d = int(rng.integers(8, 512))
        alpha = float(rng.uniform(0.005, 0.5))
        c = 2.0 * gate.z_quantile(alpha) / math.sqrt(5.0 * d)
        if c >= 1.0:
            continue
        r = gate.contraction_threshold(d, alpha)
        if abs((1 - r * r) - c * math.sqrt(1 + r ** 4)) > 1e-9:
            solve_fails.append(f"seed={seed} d={d} alpha={alpha!r}")
    dims = [16, 32, 64, 128, 256]
    alphas = [0.01, 0.05, 0.1, 0.5]
    for a in alphas:
        thresholds = [gate.contraction_threshold(d, a) for d in dims]
        if any(b < x for x, b in zip(thresholds, thresholds[1:])):
            monotone_fails.append(f"alpha={a} thresholds={thresholds}")
    for d in dims:
        thresholds = [gate.contraction_threshold(d, a) for a in alphas]
        if any(b < x for x, b in zip(thresholds, thresholds[1:])):
            monotone_fails.append(f"d={d} thresholds={thresholds}")
    for i in range(100):
        flat = float(rng.uniform(0.0, 5.0))
        if gate.decide(0.0, flat, cfg).flatten:
            zero_fails.append(f"seed={seed} instance={i} flat={flat!r}")
    return [
        _result("gate", "decide_matches_z_test_region", equiv_fails, n),
        _result("gate", "threshold_solves_equality", solve_fails, 50),
        _result("gate", "threshold_monotone_in_d_and_alpha", monotone_fails, len(dims) + len(alphas)),
        _result("gate", "constant_vector_never_flattens", zero_fails, 100),
    ]


def _variance_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    identity_fails: list[str] = []
    n = 300
    for i in range(n):
        t = int(rng.integers(2, 200))
        d = int(rng.integers(1, 16))
        k = int(rng.integers(1, 10))
        pts = rng.normal(0.0, 10.0 ** rng.uniform(-2, 2), size=(t, d)) + rng.uniform(-100, 100)
        labels = rng.integers(0, k, size=t)
        rep = analysis.variance_decomposition(pts, labels, group_count=k)
        lhs = rep.total
        rhs = rep.intra + rep.inter
        denom = np.maximum(np.abs(lhs), 1e-300)
        if np.max(np.abs(lhs - rhs) / denom) > 1e-9:
            identity_fails.append(f"seed={seed} instance={i} t={t} d={d} k={k}")
    return [_result("variance", "total_equals_intra_plus_inter", identity_fails, n)]


def _covering_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    bound_fails: list[str] = []
    size_fails: list[str] = []
    n = 40
    for i in range(n):
        count = int(rng.integers(2, 300))
        d = int(rng.integers(1, 5))
        rho = float(rng.uniform(0.2, 0.9))
        pts = rng.normal(0.0, 10.0 ** rng.uniform(-1, 1), size=(count, d)) + rng.uniform(-5, 5)
        rep = analysis.covering_bound_check(pts, rho, bits=2)
        repro = f"seed={seed} instance={i} count={count} d={d} rho={rho!r}"
        if not rep.bound_holds:
            bound_fails.append(repro)
        if rep.epsilon > 0 and rep.epsilon_net_size > rep.net_size_estimate:
            size_fails.append(repro)
    diag = np.outer(np.linspace(-3, 3, 17), np.ones(3)) + 0.5
    rep = analysis.covering_bound_check(diag, 0.5, bits=2)
    if not (rep.bound_holds and rep.r_w_star == 0.0):
        bound_fails.append("diagonal set should have zero width radius")
    return [
        _result("covering", "residual_bound_holds", bound_fails, n + 1),
        _result("covering", "net_size_within_estimate", size_fails, n),
    ]


_SUITES = {
    "quant": _quant_suite,
    "patterns": _patterns_suite,
    "gate": _gate_suite,
    "variance": _variance_suite,
    "covering": _covering_suite,
}
