"""Brain-float (bfloat16) bit-pattern helpers.

Row min/max metadata travels as raw bfloat16 bit patterns inside uint16
arrays. numpy has no bfloat16 dtype, so the conversions are done by hand
on the float32 representation using round-to-nearest-even.
"""

import numpy as np


def f32_to_bf16_bits(x) -> np.ndarray:
    """Round values to bfloat16 and return the raw uint16 bit patterns."""
    arr = np.asarray(x, dtype=np.float32)
    u = np.atleast_1d(arr).view(np.uint32)
    # round to nearest even on the truncated 16 mantissa bits
    rounded = u.astype(np.uint64) + 0x7FFF + ((u >> 16) & 1)
    bits = (rounded >> np.uint64(16)).astype(np.uint16)
    return bits.reshape(arr.shape)


def bf16_bits_to_f32(bits) -> np.ndarray:
    """Expand raw bfloat16 bit patterns to float32. Exact."""
    b = np.asarray(bits, dtype=np.uint16)
    out = (np.atleast_1d(b).astype(np.uint32) << np.uint32(16)).view(np.float32)
    return out.reshape(b.shape)


def bf16_round(x) -> np.ndarray:
    """Round through bfloat16 precision, returned as float32."""
    return bf16_bits_to_f32(f32_to_bf16_bits(x))
