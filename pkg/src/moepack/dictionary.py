"""Static dictionary over ternary value pairs for fixed-to-variable coding.

The dictionary holds exactly 2**16 sequences of 1..14 ternary pairs, the
highest-probability sequences under an i.i.d. value distribution with
P(0) = p0 and P(1) = P(2) = (1 - p0) / 2. It is generated by best-first
expansion with a max-priority queue: start from the empty sequence, pop
the most probable sequence, append it to the dictionary, and push its
nine single-pair extensions (sequences already at the maximum length are
not re-expanded). Ties are exact in the integer exponent vector (counts
of zero and non-zero values) and break toward shorter sequences, then
lexicographically smaller value sequences, so the full entry order is a
pure function of p0.

Every entry also gets a packed pair of uint32 decode words: bits [0, 4)
of each word store the pair count (stored twice so a decoder lane can
work with only half of the data), and bits [4 + 2i, 6 + 2i) of word 0 /
word 1 store ternary value i for i in [0, 14) / [14, 28), zero-padded.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError

DICT_SIZE = 1 << 16
MAX_PAIRS = 14
NUM_PAIRS = 9  # ternary pair alphabet
DICT_MAGIC = b"QMOEDICT"
DICT_VERSION = 1
DEFAULT_P0 = 0.885

# pair symbol code for values (a, b) is 3 * a + b
PAIR_VALUES = [(a, b) for a in range(3) for b in range(3)]


@dataclass(frozen=True)
class PairDistribution:
    """i.i.d. distribution over ternary values: P(0) = p0, the two
    non-zero values split the rest evenly."""

    p0: float = DEFAULT_P0

    def __post_init__(self):
        if not (0.0 <= self.p0 <= 1.0):
            raise ValueError(f"p0 must lie in [0, 1], got {self.p0}")

    @property
    def p_other(self) -> float:
        return (1.0 - self.p0) / 2.0

    def value_probabilities(self) -> np.ndarray:
        return np.array([self.p0, self.p_other, self.p_other])

    def pair_probability(self, a: int, b: int) -> float:
        p = self.value_probabilities()
        return float(p[a] * p[b])

    def require_dictionary_valid(self) -> None:
        """Dictionary generation needs the all-zero pair to be the unique
        maximum, i.e. 1/3 < p0 < 1."""
        if not (1.0 / 3.0 < self.p0 < 1.0):
            raise ValueError(
                f"dictionary generation requires 1/3 < p0 < 1, got {self.p0}"
            )


class Trie:
    """Prefix tree over pair symbols, stored as flat transition arrays.

    Node 0 is the root; every other node corresponds to one dictionary
    entry (the generated dictionary is prefix-closed, so the two sets
    coincide). ``next_node[node, pair]`` is the child id or -1.
    """

    def __init__(self, next_node: np.ndarray, entry_of_node: np.ndarray):
        self.next_node = next_node
        self.entry_of_node = entry_of_node

    def longest_prefix(self, pairs: np.ndarray, start: int) -> tuple[int, int]:
        """Longest dictionary entry matching ``pairs[start:]``.

        ``pairs`` holds pair symbol codes in [0, 9). Returns the entry
        index and the number of pairs consumed (always >= 1: all nine
        single pairs are entries).
        """
        node = 0
        i = start
        n = len(pairs)
        nxt = self.next_node
        while i < n:
            child = nxt[node, pairs[i]]
            if child < 0:
                break
            node = child
            i += 1
        entry = int(self.entry_of_node[node])
        if entry < 0:
            raise CorruptionError("pair stream has no dictionary match")
        return entry, i - start


def pack_decode_words(pairs: list[tuple[int, int]]) -> tuple[int, int]:
    """Pack one pair sequence into its two uint32 decode words."""
    n = len(pairs)
    if not (1 <= n <= MAX_PAIRS):
        raise ValueError(f"sequence must hold 1..{MAX_PAIRS} pairs, got {n}")
    values = [v for pair in pairs for v in pair]
    words = [n, n]
    for i, v in enumerate(values):
        if not (0 <= v <= 2):
            raise ValueError(f"ternary values must lie in [0, 2], got {v}")
        words[i // 14] |= v << (4 + 2 * (i % 14))
    return words[0], words[1]


def unpack_decode_words(word0: int, word1: int) -> list[tuple[int, int]]:
    """Inverse of :func:`pack_decode_words`."""
    n = word0 & 0xF
    if n != (word1 & 0xF):
        raise CorruptionError("pair count differs between decode words")
    if not (1 <= n <= MAX_PAIRS):
        raise CorruptionError(f"pair count {n} out of range")
    values = []
    for i in range(2 * n):
        word = word0 if i < 14 else word1
        values.append((word >> (4 + 2 * (i % 14))) & 3)
    return [(values[i], values[i + 1]) for i in range(0, len(values), 2)]


def _pack_all(values: np.ndarray, pair_counts: np.ndarray) -> np.ndarray:
    """Vectorized decode-word packing for the whole entry table."""
    shifts = (4 + 2 * np.arange(14, dtype=np.uint32))[None, :]
    vals = values.astype(np.uint32)
    w0 = pair_counts.astype(np.uint32) + (vals[:, :14] << shifts).sum(
        axis=1, dtype=np.uint32
    )
    w1 = pair_counts.astype(np.uint32) + (vals[:, 14:] << shifts).sum(
        axis=1, dtype=np.uint32
    )
    return np.stack([w0, w1], axis=1)


def _unpack_all(decode_words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized inverse of :func:`_pack_all`, with validation."""
    w0 = decode_words[:, 0]
    w1 = decode_words[:, 1]
    counts = (w0 & 0xF).astype(np.uint8)
    if not np.array_equal(counts, (w1 & 0xF).astype(np.uint8)):
        raise CorruptionError("pair counts differ between decode words")
    if counts.min(initial=MAX_PAIRS) < 1 or counts.max(initial=1) > MAX_PAIRS:
        raise CorruptionError("pair count out of range in decode words")
    shifts = (4 + 2 * np.arange(14, dtype=np.uint32))[None, :]
    values = np.empty((decode_words.shape[0], 28), dtype=np.uint8)
    values[:, :14] = (w0[:, None] >> shifts) & 3
    values[:, 14:] = (w1[:, None] >> shifts) & 3
    # padding slots beyond the stored values must be zero
    slot = np.arange(28, dtype=np.uint32)[None, :]
    if np.any(values * (slot >= 2 * counts[:, None].astype(np.uint32)) != 0):
        raise CorruptionError("non-zero padding in decode words")
    return values, counts


def _build_trie(values: np.ndarray, pair_counts: np.ndarray) -> Trie:
    """Rebuild the prefix tree from the entry table.

    Entries must appear parents-first (generation order guarantees it);
    anything else means a corrupt table.
    """
    n = values.shape[0]
    next_node = np.full((n + 1, NUM_PAIRS), -1, dtype=np.int32)
    entry_of_node = np.full(n + 1, -1, dtype=np.int32)
    node_of_prefix: dict[bytes, int] = {b"": 0}
    for i in range(n):
        length = 2 * int(pair_counts[i])
        seq = values[i, :length].tobytes()
        parent = node_of_prefix.get(seq[:-2])
        if parent is None:
            raise CorruptionError("entry table is not prefix-closed")
        pair = 3 * seq[-2] + seq[-1]
        if next_node[parent, pair] != -1:
            raise CorruptionError("duplicate entry in table")
        next_node[parent, pair] = i + 1
        entry_of_node[i + 1] = i
        node_of_prefix[seq] = i + 1
    if n and (next_node[0] < 0).any():
        raise CorruptionError("dictionary must contain all nine single pairs")
    return Trie(next_node, entry_of_node)


class Dictionary:
    """Generated entry table plus its packed decode words and trie."""

    def __init__(self, p0: float, decode_words: np.ndarray):
        if decode_words.shape != (DICT_SIZE, 2) or decode_words.dtype != np.uint32:
            raise CorruptionError("decode word table must be (65536, 2) uint32")
        self.p0 = float(p0)
        self.decode_words = decode_words
        self.values, self.pair_counts = _unpack_all(decode_words)
        self.trie = _build_trie(self.values, self.pair_counts)
        self.hash64 = _hash_dictionary(self.p0, decode_words)

    def __len__(self) -> int:
        return DICT_SIZE

    def entry(self, index: int) -> tuple[tuple[int, int], ...]:
        """Entry ``index`` as a tuple of ternary value pairs."""
        n = int(self.pair_counts[index])
        vals = self.values[index, : 2 * n]
        return tuple((int(vals[i]), int(vals[i + 1])) for i in range(0, 2 * n, 2))

    def entry_log2_probability(self, index: int) -> float:
        """log2 probability of an entry under the generating distribution."""
        n = int(self.pair_counts[index])
        vals = self.values[index, : 2 * n]
        zeros = int(np.count_nonzero(vals == 0))
        dist = PairDistribution(self.p0)
        return zeros * math.log2(dist.p0) + (2 * n - zeros) * math.log2(dist.p_other)


def _hash_dictionary(p0: float, decode_words: np.ndarray) -> int:
    digest = hashlib.sha256(
        struct.pack("<d", p0) + decode_words.astype("<u4").tobytes()
    ).digest()
    return int.from_bytes(digest[:8], "little")


def generate_dictionary(dist: PairDistribution | None = None) -> Dictionary:
    """Generate the 2**16-entry dictionary for ``dist`` (best-first)."""
    dist = dist or PairDistribution()
    dist.require_dictionary_valid()
    log_p0 = math.log(dist.p0)
    log_q = math.log(dist.p_other)

    pair_bytes = [bytes(pair) for pair in PAIR_VALUES]
    pair_zero_counts = [pair.count(0) for pair in PAIR_VALUES]

    values = np.zeros((DICT_SIZE, 28), dtype=np.uint8)
    pair_counts = np.zeros(DICT_SIZE, dtype=np.uint8)

    # heap items: (-log prob, pair count, value bytes, parent entry, zero count)
    heap: list[tuple[float, int, bytes, int, int]] = [(-0.0, 0, b"", -1, 0)]
    count = 0
    while count < DICT_SIZE:
        neg_logp, n_pairs, seq, parent, zeros = heapq.heappop(heap)
        if n_pairs > 0:
            idx = count
            count += 1
            pair_counts[idx] = n_pairs
            if parent >= 0:
                values[idx, : 2 * n_pairs - 2] = values[parent, : 2 * n_pairs - 2]
            values[idx, 2 * n_pairs - 2 : 2 * n_pairs] = np.frombuffer(seq[-2:], np.uint8)
            parent_for_children = idx
        else:
            parent_for_children = -1
        if n_pairs >= MAX_PAIRS:
            continue
        for pair in range(NUM_PAIRS):
            child_zeros = zeros + pair_zero_counts[pair]
            child_nonzeros = 2 * (n_pairs + 1) - child_zeros
            child_logp = child_zeros * log_p0 + child_nonzeros * log_q
            heapq.heappush(
                heap,
                (
                    -child_logp,
                    n_pairs + 1,
                    seq + pair_bytes[pair],
                    parent_for_children,
                    child_zeros,
                ),
            )

    return Dictionary(dist.p0, _pack_all(values, pair_counts))


def save_dictionary(dic: Dictionary, path: str) -> None:
    """Serialize: magic, version byte, p0 as float64, then the decode
    word table, all little-endian. The trie is rebuilt on load."""
    with open(path, "wb") as fh:
        fh.write(DICT_MAGIC)
        fh.write(bytes([DICT_VERSION]))
        fh.write(struct.pack("<d", dic.p0))
        fh.write(dic.decode_words.astype("<u4").tobytes())


def load_dictionary(path: str) -> Dictionary:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = len(DICT_MAGIC) + 1 + 8
    expected = header + DICT_SIZE * 8
    if len(blob) < header or blob[: len(DICT_MAGIC)] != DICT_MAGIC:
        raise CorruptionError("not a dictionary file (bad magic)")
    if blob[len(DICT_MAGIC)] != DICT_VERSION:
        raise CorruptionError(f"unsupported dictionary version {blob[len(DICT_MAGIC)]}")
    if len(blob) != expected:
        raise CorruptionError(
            f"dictionary file has {len(blob)} bytes, expected {expected}"
        )
    (p0,) = struct.unpack("<d", blob[len(DICT_MAGIC) + 1 : header])
    words = np.frombuffer(blob[header:], dtype="<u4").reshape(DICT_SIZE, 2)
    return Dictionary(p0, words.astype(np.uint32))
