"""Row-wise quantization grids and a batched GPTQ solver.

Expert weight matrices are quantized row-wise to a ternary grid
{w_min, 0, w_max} or to a 2-bit grid (four equally spaced levels with an
exact zero level, placed by a rounded zero-point). The solver processes a
group of equally shaped experts at once, each against its own input
Hessian, and applies the robustness rules needed for unattended batch
runs: relative Hessian dampening, per-expert fallback to plain
round-to-nearest when a Hessian is empty or not Cholesky-factorizable,
and masked Hessian accumulation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_bits_to_f32, f32_to_bf16_bits

logger = logging.getLogger(__name__)

MODE_TERNARY = "ternary"
MODE_2BIT = "2bit"
VALID_MODES = (MODE_TERNARY, MODE_2BIT)

DEFAULT_DAMPING = 0.1
DEFAULT_BLOCK_SIZE = 128
DEFAULT_GROUP_SIZE = 16


def _check_mode(mode: str) -> None:
    if mode not in VALID_MODES:
        raise ValueError(f"unknown grid mode {mode!r}, expected one of {VALID_MODES}")


def reconstruction_levels(mode: str, row_minmax: np.ndarray) -> np.ndarray:
    """Per-row reconstruction levels, indexed by code, as float32.

    ``row_minmax`` holds bfloat16 bit patterns (min, max) per row; the
    levels are therefore exactly what dequantization produces.  Ternary
    rows map code 0 to 0.0, code 1 to w_min and code 2 to w_max.  2-bit
    rows use four levels spaced by (w_max - w_min) / 3 and shifted so
    that one level is exactly zero.
    """
    _check_mode(mode)
    mn = bf16_bits_to_f32(row_minmax[:, 0])
    mx = bf16_bits_to_f32(row_minmax[:, 1])
    if mode == MODE_TERNARY:
        return np.stack([np.zeros_like(mn), mn, mx], axis=1)
    scale = (mx - mn) / np.float32(3.0)
    safe = np.where(scale > 0, scale, np.float32(1.0))
    zero_point = np.where(scale > 0, np.clip(np.rint(-mn / safe), 0, 3), 0.0)
    ks = np.arange(4, dtype=np.float32)
    return scale[:, None] * (ks[None, :] - zero_point[:, None].astype(np.float32))


@dataclass(frozen=True)
class QuantGrid:
    """Per-row quantization levels for one weight matrix."""

    mode: str
    row_min: np.ndarray  # float32 (rows,), true row minimum
    row_max: np.ndarray  # float32 (rows,), true row maximum

    def __post_init__(self):
        _check_mode(self.mode)
        if self.row_min.shape != self.row_max.shape or self.row_min.ndim != 1:
            raise ValueError("row_min and row_max must be equal-length vectors")

    @property
    def rows(self) -> int:
        return self.row_min.shape[0]

    @property
    def num_levels(self) -> int:
        return 3 if self.mode == MODE_TERNARY else 4

    def minmax_bits(self) -> np.ndarray:
        """(rows, 2) uint16 bfloat16 bit patterns of (min, max)."""
        return np.stack(
            [f32_to_bf16_bits(self.row_min), f32_to_bf16_bits(self.row_max)], axis=1
        )

    def levels(self) -> np.ndarray:
        """(rows, L) float32 reconstruction levels in code order."""
        return reconstruction_levels(self.mode, self.minmax_bits())


def make_grid(w: np.ndarray, mode: str = MODE_TERNARY) -> QuantGrid:
    """Build the row-wise grid from the actual row extrema of ``w``.

    Degenerate rows are allowed: an all-zero row yields the (0, 0) grid
    on which every value quantizes to code 0.
    """
    _check_mode(mode)
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError("weights must be a non-empty 2d array")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    return QuantGrid(
        mode=mode,
        row_min=w.min(axis=1).astype(np.float32),
        row_max=w.max(axis=1).astype(np.float32),
    )


def _code_order_by_magnitude(levels: np.ndarray) -> np.ndarray:
    # stable sort keeps code order among equal magnitudes, so ties between
    # distances resolve toward the smaller-magnitude level (code 0 first)
    return np.argsort(np.abs(levels), axis=1, kind="stable")


def _nearest_codes(values: np.ndarray, sorted_levels: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Nearest-level codes for ``values``.

    ``sorted_levels`` and ``order`` carry one magnitude-ascending level
    list per row, broadcast against ``values[..., None]``; distance ties
    pick the smaller-magnitude level.
    """
    dist = np.abs(values[..., None] - sorted_levels)
    idx = np.argmin(dist, axis=-1)
    picked = np.take_along_axis(np.broadcast_to(order, dist.shape), idx[..., None], axis=-1)
    return picked[..., 0].astype(np.uint8)


def _validate_codes(codes: np.ndarray, limit: int) -> None:
    if codes.ndim != 2 or codes.dtype != np.uint8:
        raise ValueError("codes must be a 2d uint8 array")
    if codes.size and int(codes.max()) >= limit:
        raise ValueError(f"codes must lie in [0, {limit})")


@dataclass
class TernaryMatrix:
    """Quantized matrix with codes in {0, 1, 2}.

    Code 0 dequantizes to 0.0, code 1 to the stored row minimum and
    code 2 to the stored row maximum (both bfloat16).
    """

    codes: np.ndarray  # uint8 (rows, cols)
    row_minmax: np.ndarray  # uint16 (rows, 2), bfloat16 bit patterns

    mode = MODE_TERNARY

    def __post_init__(self):
        _validate_codes(self.codes, 3)
        if self.row_minmax.shape != (self.codes.shape[0], 2):
            raise ValueError("row_minmax must be (rows, 2)")
        if self.row_minmax.dtype != np.uint16:
            raise ValueError("row_minmax must hold uint16 bit patterns")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    def levels(self) -> np.ndarray:
        return reconstruction_levels(self.mode, self.row_minmax)

    def dequant(self) -> np.ndarray:
        """Dense float32 reconstruction."""
        return np.take_along_axis(self.levels(), self.codes.astype(np.intp), axis=1)

    def zero_mask(self) -> np.ndarray:
        return self.codes == 0


@dataclass
class TwoBitMatrix:
    """Quantized matrix with codes in {0..3} indexing four spaced levels."""

    codes: np.ndarray  # uint8 (rows, cols)
    row_minmax: np.ndarray  # uint16 (rows, 2), bfloat16 bit patterns

    mode = MODE_2BIT

    def __post_init__(self):
        _validate_codes(self.codes, 4)
        if self.row_minmax.shape != (self.codes.shape[0], 2):
            raise ValueError("row_minmax must be (rows, 2)")
        if self.row_minmax.dtype != np.uint16:
            raise ValueError("row_minmax must hold uint16 bit patterns")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    def levels(self) -> np.ndarray:
        return reconstruction_levels(self.mode, self.row_minmax)

    def zero_codes(self) -> np.ndarray:
        """Per-row code of the exact-zero level."""
        return np.argmin(np.abs(self.levels()), axis=1).astype(np.uint8)

    def dequant(self) -> np.ndarray:
        return np.take_along_axis(self.levels(), self.codes.astype(np.intp), axis=1)

    def zero_mask(self) -> np.ndarray:
        return self.codes == self.zero_codes()[:, None]


def _wrap_codes(mode: str, codes: np.ndarray, grid: QuantGrid):
    if mode == MODE_TERNARY:
        return TernaryMatrix(codes=codes, row_minmax=grid.minmax_bits())
    return TwoBitMatrix(codes=codes, row_minmax=grid.minmax_bits())


def rtn_quantize(w: np.ndarray, grid: QuantGrid) -> TernaryMatrix | TwoBitMatrix:
    """Round each weight to the nearest grid level, ties toward zero."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != grid.rows:
        raise ValueError("weights do not match the grid")
    levels = grid.levels().astype(np.float64)
    order = _code_order_by_magnitude(levels)
    sorted_levels = np.take_along_axis(levels, order, axis=1)
    rows, cols = w.shape
    codes = np.empty((rows, cols), dtype=np.uint8)
    step = max(1, (1 << 22) // max(1, cols))  # bound the (rows, cols, L) temporary
    for r0 in range(0, rows, step):
        r1 = min(rows, r0 + step)
        codes[r0:r1] = _nearest_codes(
            w[r0:r1], sorted_levels[r0:r1, None, :], order[r0:r1, None, :]
        )
    return _wrap_codes(grid.mode, codes, grid)


@dataclass
class Hessian:
    """Input second-moment matrix for one expert, plus the token count
    that produced it."""

    matrix: np.ndarray  # float64 (dim, dim)
    token_count: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.token_count == 0


def accumulate_hessian(tokens: np.ndarray, mask: np.ndarray | None = None) -> Hessian:
    """Sum of outer products x x^T over the unmasked tokens.

    ``tokens`` is (n, dim) with one token per row. ``mask`` marks tokens
    to exclude (True = masked out); masked tokens contribute nothing. An
    empty or fully masked token set yields a zero Hessian with
    ``token_count == 0`` so callers can fall back to round-to-nearest.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (n, dim)")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (tokens.shape[0],):
            raise ValueError("mask length must equal the token count")
        tokens = tokens[~mask]
    dim = tokens.shape[1]
    if tokens.shape[0] == 0:
        return Hessian(matrix=np.zeros((dim, dim)), token_count=0)
    return Hessian(matrix=tokens.T @ tokens, token_count=tokens.shape[0])


@dataclass
class Expert:
    """One expert: weights, its calibration Hessian, and optionally the
    token block the Hessian came from."""

    weights: np.ndarray
    hessian: Hessian | None = None
    tokens: np.ndarray | None = None


@dataclass
class ExpertGroup:
    """Equally shaped experts solved together in one batched call."""

    experts: list[Expert] = field(default_factory=list)

    def __post_init__(self):
        if not self.experts:
            raise ValueError("expert group must not be empty")
        shape = self.experts[0].weights.shape
        for ex in self.experts:
            if ex.weights.ndim != 2 or ex.weights.shape != shape:
                raise ValueError("all experts in a group must share one 2d shape")
            if ex.hessian is not None and ex.hessian.dim != shape[1]:
                raise ValueError("hessian dim must equal the weight column count")

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.experts[0].weights.shape


@dataclass
class GPTQResult:
    quantized: list[TernaryMatrix | TwoBitMatrix]
    fallbacks: list[str | None]

    @property
    def fallback_count(self) -> int:
        return sum(1 for f in self.fallbacks if f is not None)


def _inverse_cholesky_upper(hessian: np.ndarray, damping: float) -> np.ndarray:
    """Upper Cholesky factor of the inverse of the dampened Hessian.

    Dampening is relative: damping * mean(diag(H)) is added to the
    diagonal before factorization. Raises LinAlgError when the dampened
    matrix is not positive definite.
    """
    h = np.array(hessian, dtype=np.float64, copy=True)
    damp = damping * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damp
    low = np.linalg.cholesky(h)
    low_inv = np.linalg.inv(low)
    h_inv = low_inv.T @ low_inv
    upper = np.linalg.cholesky(h_inv).T
    if not np.isfinite(upper).all():
        raise np.linalg.LinAlgError("non-finite Cholesky factor")
    return upper


def gptq_quantize(
    group: ExpertGroup,
    mode: str = MODE_TERNARY,
    damping: float = DEFAULT_DAMPING,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> GPTQResult:
    """Quantize a group of experts column by column with error feedback.

    Each expert minimizes || (Q - W) X ||_F^2 against its own Hessian
    H = X X^T: columns are quantized left to right, the induced error is
    propagated into the not-yet-quantized columns through the inverse
    Hessian's Cholesky factor, and updates outside the current column
    block are applied lazily once per block. Grids come from the original
    (pre-feedback) row extrema.

    Experts whose Hessian is empty, or whose dampened Hessian fails the
    Cholesky factorization, silently fall back to round-to-nearest; the
    reason is recorded per expert in the result. With identity Hessians
    the output is bit-identical to ``rtn_quantize``.
    """
    _check_mode(mode)
    if block_size < 1:
        raise ValueError("block_size must be positive")
    n_exp = len(group)
    rows, cols = group.shape
    grids = [make_grid(ex.weights, mode) for ex in group.experts]

    fallbacks: list[str | None] = [None] * n_exp
    uppers = np.zeros((n_exp, cols, cols))
    for e, ex in enumerate(group.experts):
        if ex.hessian is None or ex.hessian.is_empty:
            fallbacks[e] = "empty_hessian"
            continue
        try:
            uppers[e] = _inverse_cholesky_upper(ex.hessian.matrix, damping)
        except np.linalg.LinAlgError:
            fallbacks[e] = "cholesky"
    for e, reason in enumerate(fallbacks):
        if reason is not None:
            logger.warning("expert %d falls back to round-to-nearest (%s)", e, reason)

    all_codes = np.empty((n_exp, rows, cols), dtype=np.uint8)
    solve = [e for e in range(n_exp) if fallbacks[e] is None]
    skip = [e for e in range(n_exp) if fallbacks[e] is not None]
    for e in skip:
        all_codes[e] = rtn_quantize(group.experts[e].weights, grids[e]).codes

    if solve:
        work = np.stack([np.asarray(group.experts[e].weights, dtype=np.float64) for e in solve])
        levels = np.stack([grids[e].levels().astype(np.float64) for e in solve])
        order = _code_order_by_magnitude(levels.reshape(-1, levels.shape[-1]))
        order = order.reshape(levels.shape)
        sorted_levels = np.take_along_axis(levels, order, axis=2)
        upper = uppers[solve]
        codes = np.empty_like(work, dtype=np.uint8)
        for b0 in range(0, cols, block_size):
            b1 = min(cols, b0 + block_size)
            block = work[:, :, b0:b1]
            err = np.zeros((len(solve), rows, b1 - b0))
            for j in range(b1 - b0):
                col = b0 + j
                vals = block[:, :, j]
                dist = np.abs(vals[..., None] - sorted_levels)
                idx = np.argmin(dist, axis=-1)[..., None]
                qvals = np.take_along_axis(sorted_levels, idx, axis=2)[..., 0]
                codes[:, :, col] = np.take_along_axis(order, idx, axis=2)[..., 0]
                col_err = (vals - qvals) / upper[:, col, col][:, None]
                if j + 1 < b1 - b0:
                    block[:, :, j + 1 :] -= (
                        col_err[:, :, None] * upper[:, col, b0 + j + 1 : b1][:, None, :]
                    )
                err[:, :, j] = col_err
            if b1 < cols:
                work[:, :, b1:] -= err @ upper[:, b0:b1, b1:]
        for i, e in enumerate(solve):
            all_codes[e] = codes[i]

    quantized = [
        _wrap_codes(mode, all_codes[e], grids[e]) for e in range(n_exp)
    ]
    return GPTQResult(quantized=quantized, fallbacks=fallbacks)


def reconstruction_objective(
    weights: np.ndarray, dequantized: np.ndarray, tokens: np.ndarray
) -> float:
    """Squared Frobenius error of the quantized layer on a token block:
    || (Q - W) X^T ||_F^2 with tokens as rows of X."""
    delta = np.asarray(dequantized, dtype=np.float64) - np.asarray(weights, dtype=np.float64)
    proj = delta @ np.asarray(tokens, dtype=np.float64).T
    return float(np.sum(proj * proj))
