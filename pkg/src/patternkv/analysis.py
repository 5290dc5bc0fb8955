"""Diagnostics and models around the cache pipeline.

Holds the variance decomposition that motivates pattern alignment, the
token-to-cluster consistency metric, the covering-net check behind the
residual-range bound, the closed-form memory accounting, and a seeded
synthetic stream generator for experiments without a real model trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, UsageError
from .quant import SUPPORTED_BITS
from .stream import KvStream


@dataclass(frozen=True)
class VarianceReport:
    """Population-variance split of vectors by their group assignment.

    All three per-dimension arrays satisfy total = intra + inter; the
    *_sum fields aggregate over dimensions.
    """

    total: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    total_sum: float
    intra_sum: float
    inter_sum: float


def variance_decomposition(
    vectors: np.ndarray, assignment: np.ndarray, group_count: int | None = None
) -> VarianceReport:
    """Split total variance into within-group and between-group parts.

    Uses population variances (divide by N) so the law of total variance
    holds as an identity: Var(Z) = E[Var(Z | group)] + Var(E[Z | group]),
    per dimension.

    Args:
        vectors: (T, d) array of row vectors.
        assignment: (T,) integer group id per row.
        group_count: Optional id-range bound; defaults to max id + 1.

    Raises:
        UsageError: Shape mismatch or an assignment id out of range.
    """
    pts = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(assignment)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise UsageError("variance decomposition expects a non-empty 2-D array")
    if labels.shape != (pts.shape[0],):
        raise UsageError("assignment must provide exactly one group id per vector")
    if not np.issubdtype(labels.dtype, np.integer):
        raise UsageError("assignment ids must be integers")
    k = int(labels.max()) + 1 if group_count is None else group_count
    if labels.min() < 0 or labels.max() >= k:
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise UsageError(f"assignment id {labels[bad]} at row {bad} outside [0, {k})")

    n = pts.shape[0]
    grand = pts.mean(axis=0)
    total = ((pts - grand) ** 2).mean(axis=0)
    intra = np.zeros(pts.shape[1])
    inter = np.zeros(pts.shape[1])
    for g in range(k):
        members = pts[labels == g]
        if members.shape[0] == 0:
            continue
        w = members.shape[0] / n
        mu = members.mean(axis=0)
        intra += w * ((members - mu) ** 2).mean(axis=0)
        inter += w * (mu - grand) ** 2
    return VarianceReport(
        total=total,
        intra=intra,
        inter=inter,
        total_sum=float(total.sum()),
        intra_sum=float(intra.sum()),
        inter_sum=float(inter.sum()),
    )


@dataclass(frozen=True)
class ConsistencyReport:
    """Per-token-id majority share of cluster assignments.

    per_token maps each id occurring at least twice to the share of its
    occurrences landing in its most common cluster; aggregate is the mean
    over those ids, or nan when no id repeats.
    """

    per_token: dict[int, float]
    aggregate: float


def consistency_metric(token_ids: np.ndarray, cluster_ids: np.ndarray) -> ConsistencyReport:
    ids = np.asarray(token_ids).ravel()
    clusters = np.asarray(cluster_ids).ravel()
    if ids.shape != clusters.shape:
        raise UsageError("token_ids and cluster_ids must have equal length")
    per_token: dict[int, float] = {}
    for tok in np.unique(ids):
        mask = ids == tok
        if mask.sum() < 2:
            continue
        counts = np.bincount(clusters[mask].astype(np.int64))
        per_token[int(tok)] = float(counts.max() / counts.sum())
    agg = float(np.mean(list(per_token.values()))) if per_token else float("nan")
    return ConsistencyReport(per_token=per_token, aggregate=agg)


@dataclass(frozen=True)
class CoveringReport:
    """Outcome of the residual-range covering check.

    u_raw and u_res are worst-case per-element quantization error bounds
    (half range over code levels) before and after snapping each point to
    its nearest net point; the construction guarantees u_res <= rho * u_raw.
    """

    r_w_star: float
    epsilon: float
    epsilon_net_size: int
    net_size_estimate: float
    u_raw: float
    u_res: float
    bound_holds: bool


def covering_bound_check(points: np.ndarray, rho: float, bits: int) -> CoveringReport:
    """Build an axis-aligned grid net at radius rho * R_w* and verify the
    residual-range contraction it implies.

    R_w* is half the worst min-max width over the set after centering at
    the per-dimension midpoint, which is the width-optimal single center
    for a finite set. Net points are cell centers spaced 2 epsilon apart
    inside the bounding box, so every point sits within epsilon of its
    net point in every dimension, and the width of the snapped residual
    is at most 2 epsilon.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise UsageError("covering check expects a non-empty 2-D array of row vectors")
    if not 0.0 < rho < 1.0:
        raise UsageError(f"rho must lie in (0, 1), got {rho}")
    if bits not in SUPPORTED_BITS:
        raise UsageError(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")
    if not np.isfinite(pts).all():
        raise DataError("covering check requires finite points")

    levels = (1 << bits) - 1
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    resid = pts - center
    widths = resid.max(axis=1) - resid.min(axis=1)
    r_w_star = 0.5 * float(widths.max())
    eps = rho * r_w_star

    r_inf = float(np.abs(pts).max())
    if eps == 0.0:
        # All points lie on a shared diagonal line; each is its own net point.
        net_size = int(np.unique(pts, axis=0).shape[0])
        return CoveringReport(
            r_w_star=0.0,
            epsilon=0.0,
            epsilon_net_size=net_size,
            net_size_estimate=float(net_size),
            u_raw=0.0,
            u_res=0.0,
            bound_holds=True,
        )

    ranges = hi - lo
    counts = np.maximum(1, np.ceil(ranges / (2.0 * eps)).astype(np.int64))
    cells = np.clip(np.floor((pts - lo) / (2.0 * eps)).astype(np.int64), 0, counts - 1)
    snapped = lo + (2.0 * cells + 1.0) * eps
    snap_resid = pts - snapped
    snap_widths = snap_resid.max(axis=1) - snap_resid.min(axis=1)

    u_raw = r_w_star / levels
    u_res = 0.5 * float(snap_widths.max()) / levels
    estimate = float((1.0 + 2.0 * r_inf / eps) ** pts.shape[1])
    return CoveringReport(
        r_w_star=r_w_star,
        epsilon=eps,
        epsilon_net_size=int(np.prod(counts)),
        net_size_estimate=estimate,
        u_raw=u_raw,
        u_res=u_res,
        bound_holds=bool(u_res <= rho * u_raw),
    )


def bits_per_token(
    config,
    head_dim: int,
    pattern_set_size: int,
    token_count: int,
    side: str,
) -> float:
    """Closed-form storage cost of one committed token, in bits.

    Terms, in order: packed codes, group parameters amortized per token
    (two 16-bit values per group; keys share a group across group_size
    tokens per channel, values across the channels of one token), a
    static 16-bit pattern index when the side uses patterns (gated-off
    tokens spend it on the raw marker), and 16-bit pattern storage
    amortized over token_count. Assumes full groups.

    Args:
        config: EngineConfig-shaped object (bits, group_size, toggles).
        head_dim: Vector dimension d.
        pattern_set_size: Stored patterns on this side; pass 0 when off.
        token_count: Committed tokens amortizing the pattern storage.
        side: "k" or "v".
    """
    if side not in ("k", "v"):
        raise UsageError(f"side must be 'k' or 'v', got {side!r}")
    if head_dim < 1 or token_count < 1 or pattern_set_size < 0:
        raise UsageError("head_dim and token_count must be >= 1, pattern_set_size >= 0")
    uses_patterns = config.use_k_patterns if side == "k" else config.use_v_patterns
    codes = config.bits * head_dim
    if side == "k":
        params = 32.0 * head_dim / config.group_size
    else:
        params = 32.0
    index = 16.0 if uses_patterns else 0.0
    patterns = 16.0 * head_dim * pattern_set_size / token_count
    return codes + params + index + patterns


def fp16_reference_bits_per_token(head_dim: int) -> float:
    """Uncompressed half-precision baseline: 16 bits per element."""
    if head_dim < 1:
        raise UsageError(f"head_dim must be >= 1, got {head_dim}")
    return 16.0 * head_dim


@dataclass(frozen=True)
class KeyModel:
    """Synthetic key generator parameters.

    Keys follow a per-head channel profile with designated outlier
    channels scaled up, drifting linearly between two random profiles at
    drift_rate per step, plus i.i.d. Gaussian noise.
    """

    outlier_channels: tuple[int, ...] = ()
    outlier_multipliers: tuple[float, ...] = ()
    drift_rate: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class ValueModel:
    """Synthetic value generator parameters.

    Values are cluster centers plus Gaussian noise; each token id has a
    home cluster used with probability `consistency`, otherwise a random
    cluster is drawn for that occurrence.
    """

    cluster_count: int = 8
    center_spread: float = 5.0
    within_std: float = 0.2
    consistency: float = 1.0
    vocab_size: int = 64


@dataclass(frozen=True)
class SyntheticStreamSpec:
    layers: int = 1
    heads: int = 1
    head_dim: int = 64
    prefill_len: int = 256
    decode_len: int = 256
    k_model: KeyModel = field(default_factory=KeyModel)
    v_model: ValueModel = field(default_factory=ValueModel)
    seed: int = 0


DEFAULT_STREAM_SPEC = SyntheticStreamSpec(
    layers=2,
    heads=2,
    head_dim=64,
    prefill_len=512,
    decode_len=512,
    k_model=KeyModel(outlier_channels=(3,), outlier_multipliers=(32.0,), drift_rate=1e-3, noise_std=0.05),
    v_model=ValueModel(cluster_count=8, center_spread=5.0, within_std=0.2, consistency=0.9, vocab_size=64),
)


def _validate_spec(spec: SyntheticStreamSpec) -> None:
    if spec.layers < 1 or spec.heads < 1 or spec.head_dim < 1:
        raise UsageError("layers, heads and head_dim must all be >= 1")
    if spec.prefill_len < 1 or spec.decode_len < 0:
        raise UsageError("prefill_len must be >= 1 and decode_len >= 0")
    km, vm = spec.k_model, spec.v_model
    if len(km.outlier_channels) != len(km.outlier_multipliers):
        raise UsageError("outlier_channels and outlier_multipliers must have equal length")
    if any(not 0 <= c < spec.head_dim for c in km.outlier_channels):
        raise UsageError("outlier channel index outside head_dim")
    if km.noise_std < 0 or km.drift_rate < 0:
        raise UsageError("key noise_std and drift_rate must be non-negative")
    if vm.cluster_count < 1 or vm.vocab_size < 1:
        raise UsageError("cluster_count and vocab_size must be >= 1")
    if vm.within_std < 0 or vm.center_spread < 0:
        raise UsageError("value spreads must be non-negative")
    if not 0.0 <= vm.consistency <= 1.0:
        raise UsageError("consistency must lie in [0, 1]")


def generate_synthetic_stream(spec: SyntheticStreamSpec) -> KvStream:
    """Draw a deterministic KV stream from the spec's seed.

    The returned stream carries token_ids and per-head v_cluster_ids so
    the consistency metric can be evaluated against the ground truth.
    """
    _validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    L, H, d = spec.layers, spec.heads, spec.head_dim
    total = spec.prefill_len + spec.decode_len
    km, vm = spec.k_model, spec.v_model

    token_ids = rng.integers(0, vm.vocab_size, size=total)
    alpha = np.clip(np.arange(total) * km.drift_rate, 0.0, 1.0)[:, None]

    k_all = np.empty((L, H, total, d))
    v_all = np.empty((L, H, total, d))
    cluster_all = np.empty((L, H, total), dtype=np.int64)
    for layer in range(L):
        for head in range(H):
            p0 = rng.uniform(0.5, 1.5, size=d) * (rng.integers(0, 2, size=d) * 2 - 1)
            p1 = rng.uniform(0.5, 1.5, size=d) * (rng.integers(0, 2, size=d) * 2 - 1)
            for ch, mult in zip(km.outlier_channels, km.outlier_multipliers):
                p0[ch] *= mult
                p1[ch] *= mult
            keys = (1.0 - alpha) * p0[None, :] + alpha * p1[None, :]
            if km.noise_std > 0:
                keys = keys + rng.normal(0.0, km.noise_std, size=(total, d))
            k_all[layer, head] = keys

            centers = rng.normal(0.0, vm.center_spread, size=(vm.cluster_count, d))
            home = rng.integers(0, vm.cluster_count, size=vm.vocab_size)
            stray = rng.integers(0, vm.cluster_count, size=total)
            use_home = rng.random(total) <= vm.consistency
            clusters = np.where(use_home, home[token_ids], stray)
            vals = centers[clusters]
            if vm.within_std > 0:
                vals = vals + rng.normal(0.0, vm.within_std, size=(total, d))
            v_all[layer, head] = vals
            cluster_all[layer, head] = clusters

    T = spec.prefill_len
    return KvStream(
        prefill_k=k_all[:, :, :T],
        prefill_v=v_all[:, :, :T],
        decode_k=k_all[:, :, T:],
        decode_v=v_all[:, :, T:],
        token_ids=token_ids,
        v_cluster_ids=cluster_all,
    )


_SPEC_KEYS = {
    "layers": ("layers", int),
    "heads": ("heads", int),
    "head_dim": ("head_dim", int),
    "prefill_len": ("prefill_len", int),
    "decode_len": ("decode_len", int),
    "seed": ("seed", int),
}
_K_KEYS = {
    "k_outlier_channels": ("outlier_channels", int),
    "k_outlier_multipliers": ("outlier_multipliers", float),
    "k_drift_rate": ("drift_rate", float),
    "k_noise_std": ("noise_std", float),
}
_V_KEYS = {
    "v_clusters": ("cluster_count", int),
    "v_center_spread": ("center_spread", float),
    "v_within_std": ("within_std", float),
    "v_consistency": ("consistency", float),
    "v_vocab_size": ("vocab_size", int),
}


def parse_stream_spec(text: str) -> SyntheticStreamSpec:
    """Parse the flat key = value synthetic spec format.

    Lines are `key = value`; blank lines and lines starting with # are
    skipped. List-valued keys take comma-separated entries. Unknown keys
    and unparsable values are usage errors. Missing keys keep the
    defaults of SyntheticStreamSpec.
    """
    top: dict = {}
    k_kwargs: dict = {}
    v_kwargs: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"spec line {lineno} is not `key = value`: {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key in _SPEC_KEYS:
                name, conv = _SPEC_KEYS[key]
                top[name] = conv(value)
            elif key in _K_KEYS:
                name, conv = _K_KEYS[key]
                if name.startswith("outlier"):
                    parts = [p.strip() for p in value.split(",") if p.strip()]
                    k_kwargs[name] = tuple(conv(p) for p in parts)
                else:
                    k_kwargs[name] = conv(value)
            elif key in _V_KEYS:
                name, conv = _V_KEYS[key]
                v_kwargs[name] = conv(value)
            else:
                raise UsageError(f"unknown spec key {key!r} on line {lineno}")
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r} on line {lineno}: {value!r}") from exc
    spec = SyntheticStreamSpec(**top)
    if k_kwargs:
        spec = replace(spec, k_model=replace(spec.k_model, **k_kwargs))
    if v_kwargs:
        spec = replace(spec, v_model=replace(spec.v_model, **v_kwargs))
    _validate_spec(spec)
    return spec


def channel_statistics(stream: KvStream) -> list[dict]:
    """Per-layer key channel statistics over all heads and tokens.

    Returns one dict per layer with per-channel mean absolute value,
    minimum, maximum, and the median of the mean-abs profile.
    """
    rows = []
    for layer in range(stream.num_layers):
        keys = np.concatenate([stream.prefill_k[layer], stream.decode_k[layer]], axis=1)
        flat = keys.reshape(-1, stream.head_dim)
        mean_abs = np.abs(flat).mean(axis=0)
        rows.append(
            {
                "layer": layer,
                "mean_abs": mean_abs,
                "min": flat.min(axis=0),
                "max": flat.max(axis=0),
                "median_mean_abs": float(np.median(mean_abs)),
            }
        )
    return rows


def outlier_channels(stats_row: dict, threshold: float) -> list[int]:
    """Channels whose mean abs exceeds threshold times the layer median."""
    bar = threshold * stats_row["median_mean_abs"]
    return [int(c) for c in np.flatnonzero(stats_row["mean_abs"] > bar)]
