"""Small builders shared by several test modules."""

import numpy as np

from moepack.bf16 import f32_to_bf16_bits
from moepack.quantize import TernaryMatrix


def make_ternary(codes, row_min=-1.0, row_max=1.0) -> TernaryMatrix:
    """Wrap a raw code array (values in {0, 1, 2}) as a TernaryMatrix.

    The row metadata is the same (min, max) pair for every row; codec
    tests only care about the code stream.
    """
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("codes must be 2d")
    minmax = np.tile(
        f32_to_bf16_bits(np.array([row_min, row_max], dtype=np.float32)),
        (codes.shape[0], 1),
    ).astype(np.uint16)
    return TernaryMatrix(codes=codes, row_minmax=minmax)


def random_codes(rng, rows, cols, p0) -> np.ndarray:
    """i.i.d. ternary codes with P(0) = p0 and the rest split evenly."""
    u = rng.random(size=(rows, cols))
    q = (1.0 - p0) / 2.0
    return np.where(u < p0, 0, np.where(u < p0 + q, 1, 2)).astype(np.uint8)
