"""Sparsity, synthetic sampling, and compression-rate reporting.

Rates count the 16-bit codeword payload plus per-row metadata (one
32-bit offset per row-offset entry and one 32-bit min/max pair per row)
against 16 bits per original parameter. The dictionary itself is
excluded: it is shared by every matrix in a model, so its 512 KiB
amortize to nothing at any realistic scale (the reports say so).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bf16 import f32_to_bf16_bits
from .codec import CompressedMatrix
from .dictionary import PairDistribution
from .quantize import TernaryMatrix, TwoBitMatrix

ORIGINAL_BITS_PER_VALUE = 16  # baseline storage: one bfloat16 per weight
CODEWORD_BITS = 16
OFFSET_BITS = 32
MINMAX_BITS = 32


def natural_sparsity(m: TernaryMatrix | TwoBitMatrix) -> float:
    """Fraction of values that dequantize to exactly zero."""
    if m.codes.size == 0:
        raise ValueError("sparsity of an empty matrix is undefined")
    return float(np.count_nonzero(m.zero_mask())) / m.codes.size


def sample_ternary(
    dist: PairDistribution, rows: int, cols: int, seed: int
) -> TernaryMatrix:
    """Ternary matrix with i.i.d. codes drawn from ``dist``.

    Deterministic in ``seed``. The row min/max metadata is a (-1, 1)
    placeholder; only the code statistics matter for rate studies.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    rng = np.random.default_rng(seed)
    u = rng.random(size=(rows, cols))
    split = dist.p0 + dist.p_other
    codes = np.where(u < dist.p0, 0, np.where(u < split, 1, 2)).astype(np.uint8)
    minmax = np.tile(
        f32_to_bf16_bits(np.array([-1.0, 1.0], dtype=np.float32)), (rows, 1)
    ).astype(np.uint16)
    return TernaryMatrix(codes=codes, row_minmax=minmax)


@dataclass(frozen=True)
class RateReport:
    """Compression accounting for one compressed matrix."""

    rows: int
    cols: int
    codeword_count: int
    payload_bits: int
    metadata_bits: int
    original_bits: int

    @property
    def moe_only_rate(self) -> float:
        """Compression factor over the expert weights alone."""
        return self.original_bits / (self.payload_bits + self.metadata_bits)

    @property
    def bits_per_parameter(self) -> float:
        return ORIGINAL_BITS_PER_VALUE / self.moe_only_rate

    def as_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "codeword_count": self.codeword_count,
            "payload_bits": self.payload_bits,
            "metadata_bits": self.metadata_bits,
            "original_bits": self.original_bits,
            "moe_only_rate": self.moe_only_rate,
            "bits_per_parameter": self.bits_per_parameter,
            "dictionary_excluded": True,
        }

    def as_text(self) -> str:
        lines = [
            f"rows = {self.rows}",
            f"cols = {self.cols}",
            f"codeword_count = {self.codeword_count}",
            f"payload_bits = {self.payload_bits}",
            f"metadata_bits = {self.metadata_bits}",
            f"original_bits = {self.original_bits}",
            f"moe_only_rate = {self.moe_only_rate:.4f}",
            f"bits_per_parameter = {self.bits_per_parameter:.4f}",
            "# shared dictionary (512 KiB) excluded: amortized across all matrices",
        ]
        return "\n".join(lines)


def compression_rate(c: CompressedMatrix) -> RateReport:
    """Account for every stored bit of one compressed matrix."""
    if c.rows < 1 or c.cols < 1:
        raise ValueError("rate of an empty matrix is undefined")
    return RateReport(
        rows=c.rows,
        cols=c.cols,
        codeword_count=len(c.codewords),
        payload_bits=CODEWORD_BITS * len(c.codewords),
        metadata_bits=OFFSET_BITS * (c.rows + 1) + MINMAX_BITS * c.rows,
        original_bits=ORIGINAL_BITS_PER_VALUE * c.rows * c.cols,
    )


def theoretical_limit(p0: float) -> float:
    """Entropy bound on the per-value compression factor.

    A ternary value under the distribution has entropy
    H = -p0 log2 p0 - (1 - p0) log2((1 - p0) / 2) bits, so no codec can
    beat 16 / H on i.i.d. data.
    """
    if not (0.0 < p0 < 1.0):
        raise ValueError(f"theoretical limit needs 0 < p0 < 1, got {p0}")
    q = (1.0 - p0) / 2.0
    entropy = -p0 * math.log2(p0) - (1.0 - p0) * math.log2(q)
    return ORIGINAL_BITS_PER_VALUE / entropy
