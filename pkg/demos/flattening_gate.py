"""Flattening gate walk-through: where the accept/reject threshold
comes from, how it moves with dimension and confidence level, and what
it decides on easy and adversarial residuals.

Run:  python3 demos/flattening_gate.py
"""

import numpy as np

from patternkv import GateConfig, contraction_threshold, decide, expected_error_gain

# Flattening replaces a vector with its residual against a pattern.
# That pays off when the residual's min-max range is smaller than the
# raw range, but near-equal ranges are a coin flip: the threshold asks
# the range contraction to be statistically significant before
# committing to the residual path.
print("threshold rho* by head dimension and significance level:")
print(f"{'d':>6} " + " ".join(f"a={a:<6}" for a in (0.01, 0.05, 0.1, 0.5)))
for d in (16, 32, 64, 128, 256):
    row = [contraction_threshold(d, a) for a in (0.01, 0.05, 0.1, 0.5)]
    print(f"{d:>6} " + " ".join(f"{r:.4f} " for r in row))
print()
print("higher dimension -> tighter error estimate -> more accepting;")
print("alpha = 0.5 removes the safety margin entirely (rho* = 1).")
print()

gate = GateConfig.create(head_dim=128, alpha=0.05)
for raw, flat, label in (
    (10.0, 2.0, "strong contraction"),
    (10.0, 9.0, "borderline"),
    (10.0, 9.5, "not significant"),
    (0.0, 0.0, "constant vector (raw quantizes exactly)"),
):
    decision = decide(raw, flat, gate)
    verdict = "flatten" if decision.flatten else "keep raw"
    print(f"raw range {raw:>5.1f}, residual range {flat:>4.1f}  ->  {verdict:<8} ({label})")
print()

# The decision models in-bin error as uniform: mean squared error
# difference between the raw and flattened paths, at 2 bits in 4 dims.
mean_gain, gain_var = expected_error_gain(3.0, 0.0, bits=2, dim=4)
print(f"expected per-element error reduction for ranges 3 -> 0 at 2 bits: {mean_gain:.6f}")
print(f"variance of that estimate over 4 dims: {gain_var:.6f}")
