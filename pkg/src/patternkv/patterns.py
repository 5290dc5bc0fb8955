"""Pattern vectors for KV caches: mining, matching, reconstruction.

Patterns are reference vectors subtracted from cache entries before
group quantization. Prefill mines them by k-means over the observed
vectors; during decode each flushed window contributes its per-dimension
midrange as one new pattern. Matching minimizes the min-max distance,
which equals the quantization range of the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

ORIGIN_PREFILL = "prefill"
ORIGIN_DECODE = "decode"

KMEANS_MAX_ITERS = 25
KMEANS_REL_TOL = 1e-6


class PatternSet:
    """Append-only collection of pattern vectors of one fixed dimension."""

    def __init__(self, dim: int):
        if dim < 1:
            raise UsageError(f"pattern dimension must be >= 1, got {dim}")
        self.dim = dim
        self._matrix = np.empty((0, dim), dtype=np.float64)
        self._origins: list[str] = []

    def __len__(self) -> int:
        return self._matrix.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        """All patterns stacked row-wise, shape (len(self), dim)."""
        return self._matrix

    def origin(self, index: int) -> str:
        return self._origins[index]

    def vector(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise DataError(f"pattern index {index} out of range for set of {len(self)}")
        return self._matrix[index]

    def append(self, vector: np.ndarray, origin: str) -> int:
        """Add one pattern; returns its index. Existing indices never move."""
        vec = np.asarray(vector, dtype=np.float64).ravel()
        if vec.shape != (self.dim,):
            raise UsageError(f"pattern has dimension {vec.size}, set expects {self.dim}")
        if origin not in (ORIGIN_PREFILL, ORIGIN_DECODE):
            raise UsageError(f"unknown pattern origin {origin!r}")
        self._matrix = np.vstack([self._matrix, vec[None, :]])
        self._origins.append(origin)
        return len(self) - 1


@dataclass(frozen=True)
class PatternMatch:
    """Result of matching one vector against a PatternSet."""

    pattern_index: int
    residual: np.ndarray
    distance: float


def lloyd_kmeans(vectors: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Plain Lloyd k-means with reproducible seeding and repair.

    The first center is drawn by a seeded RNG; the rest follow greedy
    farthest-point placement (lowest index on ties). Iteration stops
    after KMEANS_MAX_ITERS rounds or when the relative improvement of the
    within-cluster sum of squares drops below KMEANS_REL_TOL. A cluster
    left empty by assignment is repaired by handing it the point
    farthest from its own centroid.

    Returns:
        (centroids, labels, objective_history) where the history holds
        the partition WSS after each update step, non-increasing.
    """
    pts = np.asarray(vectors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise UsageError("k-means expects a non-empty 2-D array of row vectors")
    if k < 1:
        raise UsageError(f"cluster count must be >= 1, got {k}")
    if not np.isfinite(pts).all():
        bad = np.argwhere(~np.isfinite(pts))[0]
        raise DataError(f"non-finite vector component at row {bad[0]}, dim {bad[1]}")

    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] <= k:
        # Every distinct vector becomes its own pattern; the partition is exact.
        centroids = distinct
        d2 = _sq_dists(pts, centroids)
        labels = np.argmin(d2, axis=1)
        return centroids, labels, [0.0]

    rng = np.random.default_rng(seed)
    centers = _farthest_point_seeds(pts, k, rng)

    history: list[float] = []
    prev = np.inf
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _sq_dists(pts, centers)
        labels = np.argmin(d2, axis=1)
        own = d2[np.arange(pts.shape[0]), labels]
        for empty in np.setdiff1d(np.arange(k), labels):
            counts = np.bincount(labels, minlength=k)
            movable = counts[labels] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            labels[far] = empty
            centers[empty] = pts[far]
            own[far] = 0.0
        for j in range(k):
            centers[j] = pts[labels == j].mean(axis=0)
        obj = float(_sq_dists(pts, centers)[np.arange(pts.shape[0]), labels].sum())
        history.append(obj)
        if obj == 0.0 or (np.isfinite(prev) and prev - obj < KMEANS_REL_TOL * prev):
            break
        prev = obj
    return centers, labels, history


def _sq_dists(pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _farthest_point_seeds(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(pts.shape[0]))
    chosen = [first]
    nearest = _sq_dists(pts, pts[first : first + 1])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, _sq_dists(pts, pts[nxt : nxt + 1])[:, 0])
    return pts[chosen].copy()


def mine_patterns(vectors: np.ndarray, pattern_count: int, seed: int) -> PatternSet:
    """Cluster prefill vectors into at most pattern_count patterns.

    Duplicates collapse first, so the effective count is
    min(pattern_count, number of distinct vectors).
    """
    pts = np.asarray(vectors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise UsageError("pattern mining expects a non-empty 2-D array of row vectors")
    centroids, _, _ = lloyd_kmeans(pts, pattern_count, seed)
    patterns = PatternSet(pts.shape[1])
    for row in centroids:
        patterns.append(row, ORIGIN_PREFILL)
    return patterns


def midrange_center(window: np.ndarray) -> np.ndarray:
    """Per-dimension midpoint 0.5 * (min + max) over a window of vectors.

    For each dimension this is the center minimizing the worst absolute
    deviation over the window, which makes it the width-optimal pattern
    for the window under min-max matching.
    """
    win = np.asarray(window, dtype=np.float64)
    if win.ndim != 2 or win.shape[0] < 1:
        raise UsageError("window must be a non-empty 2-D array of row vectors")
    return 0.5 * (win.min(axis=0) + win.max(axis=0))


def minmax_distance(x: np.ndarray, pattern: np.ndarray) -> float:
    """Range max(x - pattern) - min(x - pattern) of the residual.

    This equals the span an asymmetric quantizer must cover after
    subtracting the pattern, so smaller is strictly better for coding.
    Invariant to adding a shared constant to both arguments.
    """
    xv = np.asarray(x, dtype=np.float64)
    mv = np.asarray(pattern, dtype=np.float64)
    if xv.shape != mv.shape:
        raise UsageError(f"dimension mismatch: {xv.shape} vs {mv.shape}")
    r = xv - mv
    return float(r.max() - r.min())


def match_pattern(x: np.ndarray, patterns: PatternSet) -> PatternMatch:
    """Pick the pattern with the smallest min-max distance to x.

    Ties break toward the lowest index. Returns the match with the
    exact (unquantized) residual attached.
    """
    if len(patterns) == 0:
        raise UsageError("cannot match against an empty pattern set")
    vec = np.asarray(x, dtype=np.float64).ravel()
    if vec.shape != (patterns.dim,):
        raise UsageError(f"vector has dimension {vec.size}, patterns expect {patterns.dim}")
    res = vec[None, :] - patterns.matrix
    dists = res.max(axis=1) - res.min(axis=1)
    idx = int(np.argmin(dists))
    return PatternMatch(pattern_index=idx, residual=res[idx].copy(), distance=float(dists[idx]))


def match_many(vectors: np.ndarray, patterns: PatternSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched match_pattern over rows: (indices, residuals, distances).

    Equivalent to matching each row separately, ties toward the lowest
    pattern index.
    """
    if len(patterns) == 0:
        raise UsageError("cannot match against an empty pattern set")
    pts = np.asarray(vectors, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != patterns.dim:
        raise UsageError(f"expected rows of dimension {patterns.dim}")
    res = pts[:, None, :] - patterns.matrix[None, :, :]
    dists = res.max(axis=2) - res.min(axis=2)
    idx = np.argmin(dists, axis=1)
    rows = np.arange(pts.shape[0])
    return idx, res[rows, idx], dists[rows, idx]


def reconstruct_vector(pattern_index: int, patterns: PatternSet, residual: np.ndarray) -> np.ndarray:
    """Add a (typically dequantized) residual back onto its pattern."""
    base = patterns.vector(pattern_index)
    res = np.asarray(residual, dtype=np.float64).ravel()
    if res.shape != (patterns.dim,):
        raise UsageError(f"residual has dimension {res.size}, patterns expect {patterns.dim}")
    return base + res
