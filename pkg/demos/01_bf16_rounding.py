"""
Rounding to bfloat16 by hand
============================

bfloat16 keeps the binary32 exponent and only seven explicit mantissa bits.
This walk-through shows what the software codec does with a few values.
"""

import numpy as np

from ropelab import decode_bf16, encode_bf16, round_bf16

# %%
# One is exact. Its pattern is the upper half of the binary32 word.
print(encode_bf16(1.0), decode_bf16(0x3F80))

# %%
# ``1 + 2**-8`` sits halfway between two neighbours. The tie goes to the
# even mantissa, so it rounds down to one.
print(encode_bf16(1.00390625), decode_bf16(encode_bf16(1.00390625)))

# %%
# The spacing grows with magnitude. Near 300 the grid step is 2.
x = np.array([299.0, 300.0, 301.0, 302.9], dtype=np.float32)
print(round_bf16(x))

# %%
# Relative error stays under ``2**-8`` for normal numbers.
rng = np.random.default_rng(0)
v = rng.standard_normal(100_000).astype(np.float32)
rel = np.abs(round_bf16(v) - v) / np.abs(v)
print(f"largest relative error over 1e5 draws: {rel.max():.3e} (2**-8 = {2**-8:.3e})")
