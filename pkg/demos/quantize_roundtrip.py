"""Group quantization walk-through: encode a small group at each bit
width, inspect the packed bytes, and check the round-trip error bound.

Run:  python3 demos/quantize_roundtrip.py
"""

import numpy as np

from patternkv import dequantize_group, pack_codes, quantize_group, unpack_codes

rng = np.random.default_rng(0)
values = rng.normal(0.0, 1.0, 16)

print("original values (first 6):", np.round(values[:6], 4))
print()

for bits in (2, 4, 8):
    group = quantize_group(values, bits, "per-token")
    recovered = dequantize_group(group)
    err = np.abs(recovered - values).max()
    bound = group.params.scale / 2
    print(f"{bits}-bit: scale={group.params.scale:.5f}  zero_point={group.params.zero_point:.5f}")
    print(f"        packed into {len(group.codes)} bytes "
          f"(16 codes x {bits} bits = {16 * bits} bits)")
    print(f"        max |error| = {err:.6f}  <=  scale/2 = {bound:.6f}")
    print()

# The packed layout is little-endian within each byte: the first code
# occupies the lowest-order bits.
codes = [1, 2, 3, 0]
packed = pack_codes(codes, 2)
print(f"codes {codes} at 2 bits pack to byte {packed[0]:#010b}")
print("unpacked:", unpack_codes(packed, length=4, bits=2))

# A constant group collapses to scale 0 and reconstructs exactly.
flat = quantize_group(np.full(8, 3.25), 2, "per-token")
print()
print("constant group: scale =", flat.params.scale,
      "-> exact reconstruction:", dequantize_group(flat)[:3])
