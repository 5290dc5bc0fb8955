"""Adaptive flattening gate for value vectors.

Subtracting a pattern from a vector pays off only when it shrinks the
quantization range. Model the two quantizers' per-dimension squared
errors as uniform over their step sizes; the mean advantage of the
residual quantizer then depends on the two ranges alone, and a one-sided
z-test on that advantage collapses to a single precomputed threshold on
the range contraction ratio flat_range / raw_range. The gate flattens a
vector exactly when its ratio is at or below the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .errors import UsageError

_BISECT_TOL = 1e-12


def z_quantile(alpha: float) -> float:
    """Upper quantile z such that a standard normal exceeds z with
    probability alpha. Rational approximation accurate to ~1e-15; no
    lookup tables involved. Significance levels above one half are
    rejected because the gate is strictly one-sided."""
    if not 0.0 < alpha <= 0.5:
        raise UsageError(f"alpha must lie in (0, 0.5], got {alpha}")
    return -_ppnd16(alpha)


def _ppnd16(p: float) -> float:
    # Wichura's double-precision inverse normal CDF (central rational fit
    # plus two tail fits in sqrt(-log(p))).
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    z = num / den
    return -z if q < 0 else z


@lru_cache(maxsize=None)
def contraction_threshold(head_dim: int, alpha: float) -> float:
    """Largest contraction ratio the z-test accepts at level alpha.

    Solves 1 - rho^2 = (2 z / sqrt(5 d)) * sqrt(1 + rho^4) for rho in
    (0, 1] by bisection. The left side is the normalized mean advantage
    of flattening, the right side the significance bar; both are
    monotone, so the root is unique when it exists.

    Raises:
        UsageError: head_dim is so small relative to alpha that no ratio
            reaches significance (2 z / sqrt(5 d) >= 1).
    """
    if head_dim < 1:
        raise UsageError(f"head_dim must be >= 1, got {head_dim}")
    if not 0.0 < alpha <= 0.5:
        raise UsageError(f"alpha must lie in (0, 0.5], got {alpha}")
    z = z_quantile(alpha)
    if z <= 0.0:
        return 1.0
    c = 2.0 * z / math.sqrt(5.0 * head_dim)
    if c >= 1.0:
        raise UsageError(
            f"no contraction ratio reaches significance for head_dim={head_dim}, alpha={alpha}"
        )
    lo, hi = 0.0, 1.0
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if (1.0 - mid * mid) - c * math.sqrt(1.0 + mid ** 4) >= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GateConfig:
    """Immutable gate parameters for one head geometry.

    Attributes:
        alpha: One-sided test level in (0, 0.5].
        head_dim: Vector dimension the test averages over.
        z: Upper alpha quantile of the standard normal.
        threshold: Contraction ratio at which the test is exactly tight.
    """

    alpha: float
    head_dim: int
    z: float
    threshold: float

    @classmethod
    def create(cls, head_dim: int, alpha: float = 0.05) -> "GateConfig":
        return cls(
            alpha=alpha,
            head_dim=head_dim,
            z=z_quantile(alpha),
            threshold=contraction_threshold(head_dim, alpha),
        )


@dataclass(frozen=True)
class GateDecision:
    """Outcome of gating one vector.

    ratio is flat_range / raw_range, or +inf for a constant vector
    (raw_range 0), which is never flattened.
    """

    flatten: bool
    ratio: float
    raw_range: float
    flat_range: float


def expected_error_gain(
    raw_range: float, flat_range: float, bits: int, dim: int
) -> tuple[float, float]:
    """Mean and variance of the per-vector squared-error advantage.

    With step sizes delta = range / (2^bits - 1) and independent uniform
    per-dimension errors, quantizing the raw vector instead of the
    residual costs (delta_raw^2 - delta_flat^2) / 12 more per dimension
    on average, with variance (delta_raw^4 + delta_flat^4) / (180 dim)
    for the dimension-averaged advantage.
    """
    if raw_range < 0 or flat_range < 0:
        raise UsageError("ranges must be non-negative")
    if dim < 1:
        raise UsageError(f"dim must be >= 1, got {dim}")
    if bits < 1:
        raise UsageError(f"bits must be >= 1, got {bits}")
    levels = (1 << bits) - 1
    d_raw = raw_range / levels
    d_flat = flat_range / levels
    mean = (d_raw ** 2 - d_flat ** 2) / 12.0
    var = (d_raw ** 4 + d_flat ** 4) / (180.0 * dim)
    return mean, var


def decide(raw_range: float, flat_range: float, config: GateConfig) -> GateDecision:
    """Gate one vector: flatten exactly when the contraction ratio is at
    or below the config threshold. A constant vector (raw_range 0) is
    already free to encode and never flattens."""
    if raw_range < 0 or flat_range < 0:
        raise UsageError("ranges must be non-negative")
    if raw_range == 0.0:
        return GateDecision(flatten=False, ratio=math.inf, raw_range=0.0, flat_range=flat_range)
    ratio = flat_range / raw_range
    return GateDecision(
        flatten=ratio <= config.threshold,
        ratio=ratio,
        raw_range=raw_range,
        flat_range=flat_range,
    )
