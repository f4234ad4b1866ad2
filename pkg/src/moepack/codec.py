"""Row-wise compressed format, codec, and fused decompress+matvec.

A ternary matrix is encoded row by row: the row's codes are paired up,
the pair stream is split into greedy longest-prefix matches against the
dictionary, and each match becomes one uint16 codeword. Rows never share
codewords; ``row_off`` holds each row's span in the codeword stream, so
rows decode (and multiply) independently.

The fused matvec mirrors the decode kernel it stands in for: per output
row, codewords are expanded through the packed decode words, each value
is dequantized through the row's {0, min, max} table, products
accumulate in float32, and the final sum is rounded to bfloat16 before
being added to y. ``simulate_warp_row`` replays the same access pattern
lane by lane for one 32-thread group and records which lanes touch data.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bf16 import bf16_round
from .dictionary import DICT_SIZE, Dictionary, MAX_PAIRS
from .errors import CorruptionError, DictionaryMismatchError
from .quantize import TernaryMatrix, reconstruction_levels

CHECKPOINT_MAGIC = b"QMOE0001"


@dataclass
class CompressedMatrix:
    """One matrix in compressed form.

    ``codewords`` is the concatenated per-row stream; row r owns
    ``codewords[row_off[r]:row_off[r+1]]``. ``row_minmax`` holds the
    bfloat16 (min, max) bit patterns per row, and ``dict_hash``
    identifies the dictionary the stream was encoded against.
    """

    rows: int
    cols: int
    codewords: np.ndarray  # uint16 (n,)
    row_off: np.ndarray  # int32 (rows + 1,), monotone, row_off[0] == 0
    row_minmax: np.ndarray  # uint16 (rows, 2)
    dict_hash: int

    def validate(self) -> None:
        if self.rows < 0 or self.cols < 0 or self.cols % 2 != 0:
            raise CorruptionError("invalid compressed matrix shape")
        if self.row_off.shape != (self.rows + 1,) or self.row_off.dtype != np.int32:
            raise CorruptionError("row_off must be (rows + 1,) int32")
        if self.rows and self.row_minmax.shape != (self.rows, 2):
            raise CorruptionError("row_minmax must be (rows, 2)")
        if self.row_off[0] != 0 or self.row_off[-1] != len(self.codewords):
            raise CorruptionError("row_off does not span the codeword stream")
        if np.any(np.diff(self.row_off) < 0):
            raise CorruptionError("row_off must be monotone")


def _row_ranges(rows: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, rows)) if rows else 1
    bounds = np.linspace(0, rows, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if a < b]


def _encode_rows(pairs: np.ndarray, dic: Dictionary) -> tuple[np.ndarray, np.ndarray]:
    """Greedy longest-prefix encoding of one block of rows.

    ``pairs`` is (rows, cols // 2) pair symbols in [0, 9). All rows are
    swept in lockstep over a trie walk: a row either extends its current
    match by one pair or emits the match's codeword and restarts at the
    stalled pair. Returns the concatenated codewords and per-row counts.
    """
    n_rows, n_pairs = pairs.shape
    if n_pairs == 0:
        return np.zeros(0, dtype=np.uint16), np.zeros(n_rows, dtype=np.int64)
    nxt = dic.trie.next_node
    entry_of = dic.trie.entry_of_node
    state = np.zeros(n_rows, dtype=np.int32)
    cursor = np.zeros(n_rows, dtype=np.int32)
    counts = np.zeros(n_rows, dtype=np.int64)
    active = np.arange(n_rows)
    out_row: list[np.ndarray] = []
    out_seq: list[np.ndarray] = []
    out_cw: list[np.ndarray] = []

    def emit(rows: np.ndarray) -> None:
        entries = entry_of[state[rows]]
        if entries.size and entries.min() < 0:
            raise CorruptionError("encoder reached a non-entry trie node")
        out_row.append(rows)
        out_seq.append(counts[rows].copy())
        out_cw.append(entries.astype(np.uint16))
        counts[rows] += 1
        state[rows] = 0

    while active.size:
        here = cursor[active]
        step = nxt[state[active], pairs[active, here]]
        can = step >= 0
        stalled = active[~can]
        if stalled.size:
            emit(stalled)
        moved = active[can]
        if moved.size:
            state[moved] = step[can]
            cursor[moved] = here[can] + 1
            finished = moved[cursor[moved] == n_pairs]
            if finished.size:
                emit(finished)
        active = active[cursor[active] < n_pairs]

    row_off = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=row_off[1:])
    stream = np.empty(int(row_off[-1]), dtype=np.uint16)
    if out_row:
        rows_cat = np.concatenate(out_row)
        seq_cat = np.concatenate(out_seq)
        stream[row_off[rows_cat] + seq_cat] = np.concatenate(out_cw)
    return stream, counts


def encode(t: TernaryMatrix, dic: Dictionary, workers: int = 1) -> CompressedMatrix:
    """Compress a ternary matrix against ``dic``.

    The column count must be even (pairs are the coding unit); use
    :func:`pad_to_even` first when it is not.
    """
    if t.cols % 2 != 0:
        raise ValueError("column count must be even; pad_to_even() first")
    codes = t.codes
    pairs = (3 * codes[:, 0::2] + codes[:, 1::2]).astype(np.uint8)
    ranges = _row_ranges(t.rows, workers)
    if len(ranges) <= 1:
        parts = [_encode_rows(pairs, dic)] if t.rows else []
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(lambda r: _encode_rows(pairs[r[0] : r[1]], dic), ranges))
    streams = [p[0] for p in parts]
    counts = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    row_off = np.zeros(t.rows + 1, dtype=np.int64)
    np.cumsum(counts, out=row_off[1:])
    if row_off[-1] > np.iinfo(np.int32).max:
        raise ValueError("codeword stream exceeds 32-bit row offsets")
    return CompressedMatrix(
        rows=t.rows,
        cols=t.cols,
        codewords=np.concatenate(streams) if streams else np.zeros(0, np.uint16),
        row_off=row_off.astype(np.int32),
        row_minmax=t.row_minmax.copy(),
        dict_hash=dic.hash64,
    )


def _decode_range(
    c: CompressedMatrix, dic: Dictionary, r0: int, r1: int
) -> np.ndarray:
    """Expand rows [r0, r1) to a (r1 - r0, cols) uint8 code block."""
    lo, hi = int(c.row_off[r0]), int(c.row_off[r1])
    cws = c.codewords[lo:hi].astype(np.intp)
    lens = 2 * dic.pair_counts[cws].astype(np.int64)
    cuts = np.zeros(len(cws) + 1, dtype=np.int64)
    np.cumsum(lens, out=cuts[1:])
    per_row = cuts[c.row_off[r0 + 1 : r1 + 1] - lo] - cuts[c.row_off[r0:r1] - lo]
    if np.any(per_row != c.cols):
        raise CorruptionError("row decodes to the wrong number of values")
    vals = dic.values[cws]
    flat = vals[np.arange(28, dtype=np.int64)[None, :] < lens[:, None]]
    return flat.reshape(r1 - r0, c.cols)


def decompress(c: CompressedMatrix, dic: Dictionary, workers: int = 1) -> TernaryMatrix:
    """Expand a compressed matrix back to its exact ternary codes."""
    c.validate()
    if c.dict_hash != dic.hash64:
        raise DictionaryMismatchError(
            "checkpoint was encoded against a different dictionary"
        )
    if int(c.codewords.max(initial=0)) >= DICT_SIZE:
        raise CorruptionError("codeword out of dictionary range")
    ranges = _row_ranges(c.rows, workers)
    if not ranges:
        codes = np.zeros((c.rows, c.cols), dtype=np.uint8)
    elif len(ranges) == 1:
        codes = _decode_range(c, dic, 0, c.rows)
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            blocks = list(pool.map(lambda r: _decode_range(c, dic, r[0], r[1]), ranges))
        codes = np.concatenate(blocks, axis=0)
    return TernaryMatrix(codes=codes, row_minmax=c.row_minmax.copy())


def _matvec_range(
    c: CompressedMatrix, dic: Dictionary, x32: np.ndarray, r0: int, r1: int
) -> np.ndarray:
    out = np.empty(r1 - r0, dtype=np.float32)
    levels = reconstruction_levels("ternary", c.row_minmax[r0:r1])
    for b0 in range(r0, r1, 128):
        b1 = min(r1, b0 + 128)
        codes = _decode_range(c, dic, b0, b1)
        w = np.take_along_axis(levels[b0 - r0 : b1 - r0], codes.astype(np.intp), axis=1)
        out[b0 - r0 : b1 - r0] = w @ x32
    return out


def fused_matvec(
    c: CompressedMatrix,
    x: np.ndarray,
    dic: Dictionary,
    y: np.ndarray | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Accumulate ``y += M @ x`` directly from the compressed stream.

    Inputs are consumed in float32 and each row's dot product accumulates
    in float32; the per-row result is rounded to bfloat16 once before
    being added to ``y``, matching the decode kernel's output path. Rows
    are independent, so ``workers`` may split them without changing the
    result.
    """
    c.validate()
    if c.dict_hash != dic.hash64:
        raise DictionaryMismatchError(
            "checkpoint was encoded against a different dictionary"
        )
    x32 = np.asarray(x, dtype=np.float32)
    if x32.shape != (c.cols,):
        raise ValueError(f"x must have shape ({c.cols},)")
    if y is None:
        y = np.zeros(c.rows, dtype=np.float32)
    elif y.shape != (c.rows,):
        raise ValueError(f"y must have shape ({c.rows},)")
    ranges = _row_ranges(c.rows, workers)
    if len(ranges) <= 1:
        parts = [_matvec_range(c, dic, x32, 0, c.rows)] if c.rows else []
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(lambda r: _matvec_range(c, dic, x32, r[0], r[1]), ranges))
    for (r0, r1), part in zip(ranges, parts):
        y[r0:r1] += bf16_round(part)
    return y


def pad_to_even(t: TernaryMatrix) -> TernaryMatrix:
    """Append one all-zero column when the column count is odd.

    The extra column dequantizes to 0, so callers only need to extend
    matvec inputs with one trailing zero.
    """
    if t.cols % 2 == 0:
        return t
    codes = np.concatenate(
        [t.codes, np.zeros((t.rows, 1), dtype=np.uint8)], axis=1
    )
    return TernaryMatrix(codes=codes, row_minmax=t.row_minmax.copy())


@dataclass
class SymbolTrace:
    """One codeword as seen by the 32-lane group."""

    codeword: int
    pair_count: int
    offset: int  # value offset in the row before this symbol
    lane_values: np.ndarray  # uint8 (28,), slot read by each active lane
    extracting_lanes: int  # lanes reading stored values (2 * pair_count)


@dataclass
class WarpTrace:
    """Replay record of one row through the lane-level decode pattern."""

    row: int
    fetch_sizes: list[int] = field(default_factory=list)
    symbols: list[SymbolTrace] = field(default_factory=list)
    lane_word: np.ndarray = field(
        default_factory=lambda: np.where(np.arange(32) < 28, np.arange(32) // 14, -1)
    )
    lane_slot: np.ndarray = field(
        default_factory=lambda: np.where(np.arange(32) < 28, np.arange(32) % 14, -1)
    )
    extract_counts: np.ndarray = field(default_factory=lambda: np.zeros(32, np.int64))

    def extracted_values(self) -> np.ndarray:
        """Concatenated stored values, in stream order."""
        parts = [s.lane_values[: s.extracting_lanes] for s in self.symbols]
        return np.concatenate(parts) if parts else np.zeros(0, np.uint8)


def simulate_warp_row(c: CompressedMatrix, row: int, dic: Dictionary) -> WarpTrace:
    """Replay one row of the decode kernel's access pattern.

    Codewords are fetched in blocks of 32. For each codeword, lanes
    0..27 read decode word (lane // 14) and extract the 2-bit slot
    (lane mod 14); slots past the stored pair count read zero padding.
    Lanes 28..31 never extract. The per-symbol value offset advances by
    twice the pair count, and the replayed values must equal the
    decompressed row.
    """
    c.validate()
    if not (0 <= row < c.rows):
        raise ValueError("row out of range")
    trace = WarpTrace(row=row)
    lanes = np.arange(28)
    shifts = 4 + 2 * (lanes % 14)
    cws = c.codewords[int(c.row_off[row]) : int(c.row_off[row + 1])]
    for b0 in range(0, len(cws), 32):
        trace.fetch_sizes.append(int(min(32, len(cws) - b0)))
    offset = 0
    for cw in cws.tolist():
        words = dic.decode_words[cw]
        n0 = int(words[0] & 0xF)
        n1 = int(words[1] & 0xF)
        if n0 != n1:
            raise CorruptionError("pair count differs between decode words")
        lane_words = words[lanes // 14].astype(np.uint32)
        values = ((lane_words >> shifts) & 3).astype(np.uint8)
        trace.symbols.append(
            SymbolTrace(
                codeword=int(cw),
                pair_count=n0,
                offset=offset,
                lane_values=values,
                extracting_lanes=2 * n0,
            )
        )
        trace.extract_counts[: 2 * n0] += 1
        offset += 2 * n0
    if offset != c.cols:
        raise CorruptionError("row decodes to the wrong number of values")
    replayed = trace.extracted_values()
    direct = _decode_range(c, dic, row, row + 1)[0]
    if not np.array_equal(replayed, direct):
        raise CorruptionError("lane replay disagrees with decompress")
    return trace


def write_checkpoint(c: CompressedMatrix, path: str) -> None:
    """Serialize: magic, rows/cols/dict-hash as uint64, row offsets as
    int32, row min/max as bfloat16 bit pairs, then the uint16 codeword
    stream. Little-endian throughout, no padding."""
    c.validate()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQQ", c.rows, c.cols, c.dict_hash))
        fh.write(c.row_off.astype("<i4").tobytes())
        fh.write(c.row_minmax.astype("<u2").tobytes())
        fh.write(c.codewords.astype("<u2").tobytes())


def read_checkpoint(path: str) -> CompressedMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 24 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptionError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    rows, cols, dict_hash = struct.unpack_from("<QQQ", blob, pos)
    pos += 24
    off_bytes = 4 * (rows + 1)
    mm_bytes = 4 * rows
    if len(blob) < pos + off_bytes + mm_bytes:
        raise CorruptionError("checkpoint truncated in header arrays")
    row_off = np.frombuffer(blob, dtype="<i4", count=rows + 1, offset=pos).astype(np.int32)
    pos += off_bytes
    row_minmax = (
        np.frombuffer(blob, dtype="<u2", count=2 * rows, offset=pos)
        .astype(np.uint16)
        .reshape(rows, 2)
    )
    pos += mm_bytes
    if row_off[0] != 0 or np.any(np.diff(row_off) < 0):
        raise CorruptionError("checkpoint row offsets are not monotone from zero")
    n_codewords = int(row_off[-1])
    if len(blob) != pos + 2 * n_codewords:
        raise CorruptionError("checkpoint size disagrees with row offsets")
    codewords = np.frombuffer(blob, dtype="<u2", count=n_codewords, offset=pos).astype(
        np.uint16
    )
    c = CompressedMatrix(
        rows=int(rows),
        cols=int(cols),
        codewords=codewords,
        row_off=row_off,
        row_minmax=row_minmax,
        dict_hash=int(dict_hash),
    )
    c.validate()
    return c
