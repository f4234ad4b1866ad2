"""Calibration data flow for one transformer block, desk scale.

Tokens from all calibration samples live contiguously in a list buffer
with sample delimiters and per-token expert assignments. A block runs in
two phases. Dense phase, per sample: fetch the sample into the fast
tier, apply the dense function, record the router's expert assignment
for every token, write the result back. Sparse phase, per expert group:
gather each expert's tokens, accumulate its (optionally premasked)
Hessian from a capped prefix, quantize the group in one batched call,
push every token through the (compressed) expert, scatter the outputs
back. The tier store only does accounting, but it enforces the fast
tier's capacity and records per-token transfer counts, so the central
bandwidth invariant is checkable: each token moves bulk-to-fast and
fast-to-bulk exactly twice per block, once per phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, TierCapacityError
from .quantize import (
    DEFAULT_DAMPING,
    DEFAULT_GROUP_SIZE,
    Expert,
    ExpertGroup,
    MODE_TERNARY,
    TernaryMatrix,
    TwoBitMatrix,
    accumulate_hessian,
    gptq_quantize,
    make_grid,
    reconstruction_objective,
    rtn_quantize,
)

UNROUTED = -1


class ListBuffer:
    """Contiguous token store with sample delimiters and assignments.

    ``delimiters[i]:delimiters[i+1]`` is sample i; delimiters are
    strictly increasing, starting at 0 and ending at the token count.
    ``assignments`` holds one expert index per token (UNROUTED before
    the dense phase of the current block has seen the token).
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("token dim must be positive")
        self.dim = dim
        self.tokens = np.zeros((0, dim), dtype=np.float32)
        self.delimiters = np.array([0], dtype=np.int64)
        self.assignments = np.zeros(0, dtype=np.int32)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_samples(self) -> int:
        return len(self.delimiters) - 1

    def append_sample(self, sample: np.ndarray) -> None:
        sample = np.asarray(sample, dtype=np.float32)
        if sample.ndim != 2 or sample.shape[1] != self.dim:
            raise ValueError(f"sample must be (n, {self.dim})")
        if sample.shape[0] == 0:
            raise ValueError("empty samples are not allowed")
        self.tokens = np.concatenate([self.tokens, sample], axis=0)
        self.delimiters = np.append(self.delimiters, self.num_tokens)
        self.assignments = np.append(
            self.assignments, np.full(sample.shape[0], UNROUTED, dtype=np.int32)
        )

    def sample_bounds(self, i: int) -> tuple[int, int]:
        if not (0 <= i < self.num_samples):
            raise IndexError("sample index out of range")
        return int(self.delimiters[i]), int(self.delimiters[i + 1])

    def gather_expert_tokens(self, expert: int) -> tuple[np.ndarray, np.ndarray]:
        """Tokens assigned to ``expert`` plus their buffer positions,
        in buffer order."""
        positions = np.flatnonzero(self.assignments == expert)
        return self.tokens[positions].copy(), positions

    def scatter_expert_outputs(self, positions: np.ndarray, outputs: np.ndarray) -> None:
        outputs = np.asarray(outputs, dtype=np.float32)
        if outputs.shape != (len(positions), self.dim):
            raise ValueError("outputs do not match the gathered positions")
        self.tokens[positions] = outputs


@dataclass
class TierStore:
    """Two-tier transfer accounting: a bulk tier that owns the buffer
    and a small fast tier that work is staged through."""

    fast_capacity: int
    num_tokens: int
    reads: np.ndarray = field(init=False)  # bulk -> fast, per token
    writes: np.ndarray = field(init=False)  # fast -> bulk, per token
    occupancy: int = field(init=False, default=0)
    peak_occupancy: int = field(init=False, default=0)

    def __post_init__(self):
        if self.fast_capacity < 1:
            raise ValueError("fast tier capacity must be positive")
        self.reads = np.zeros(self.num_tokens, dtype=np.int64)
        self.writes = np.zeros(self.num_tokens, dtype=np.int64)

    def stage_in(self, positions: np.ndarray) -> None:
        n = len(positions)
        if self.occupancy + n > self.fast_capacity:
            raise TierCapacityError(
                f"staging {n} tokens would exceed fast capacity "
                f"{self.fast_capacity} (occupancy {self.occupancy})"
            )
        self.reads[positions] += 1
        self.occupancy += n
        self.peak_occupancy = max(self.peak_occupancy, self.occupancy)

    def stage_out(self, positions: np.ndarray) -> None:
        n = len(positions)
        if n > self.occupancy:
            raise TierCapacityError("staging out more tokens than are resident")
        self.writes[positions] += 1
        self.occupancy -= n

    def counters(self) -> tuple[np.ndarray, np.ndarray]:
        return self.reads.copy(), self.writes.copy()


ROUTER_RULES = ("hash", "argmax")


@dataclass(frozen=True)
class RouterSim:
    """Deterministic router: assignment is a pure function of the token
    values and the seed.

    ``hash`` mixes the token's float32 bit pattern into a near-uniform
    expert choice. ``argmax`` scores tokens against a fixed random
    linear map; ``skew`` adds a bias ramp favoring low-index experts to
    exercise extreme routing.
    """

    num_experts: int
    rule: str = "hash"
    seed: int = 0
    skew: float = 0.0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("need at least one expert")
        if self.rule not in ROUTER_RULES:
            raise ValueError(f"unknown router rule {self.rule!r}")

    def assign(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float32)
        if tokens.ndim != 2:
            raise ValueError("tokens must be (n, dim)")
        rng = np.random.default_rng(self.seed)
        if self.rule == "hash":
            mult = rng.integers(1, 1 << 63, size=tokens.shape[1], dtype=np.uint64) | 1
            bits = np.ascontiguousarray(tokens).view(np.uint32).astype(np.uint64)
            h = (bits * mult[None, :]).sum(axis=1, dtype=np.uint64)
            h ^= h >> np.uint64(33)
            h *= np.uint64(0xFF51AFD7ED558CCD)
            h ^= h >> np.uint64(33)
            return (h % np.uint64(self.num_experts)).astype(np.int32)
        proj = rng.normal(size=(tokens.shape[1], self.num_experts))
        scores = tokens.astype(np.float64) @ proj
        bias = self.skew * math.sqrt(tokens.shape[1]) * np.linspace(
            1.0, 0.0, self.num_experts
        )
        return np.argmax(scores + bias[None, :], axis=1).astype(np.int32)


@dataclass
class CapPlan:
    """Token budget for one expert: how many (prefix) tokens feed the
    Hessian and how the full token list splits into staging chunks."""

    hessian_tokens: int
    chunks: list[tuple[int, int]]


def cap_tokens(
    expert_tokens: int,
    all_counts: np.ndarray,
    multiplier: float = 4.0,
    chunk_capacity: int | None = None,
) -> CapPlan:
    """Cap calibration tokens at ``multiplier`` times the layer mean.

    The Hessian subset is a prefix (in buffer order) of at most
    ceil(multiplier * mean(all_counts)) tokens; when ``chunk_capacity``
    is given it is clamped further so the whole subset fits in the first
    residency window. The chunk list always covers all tokens, so every
    output still gets computed.
    """
    all_counts = np.asarray(all_counts)
    if all_counts.size == 0:
        raise ValueError("need at least one expert count")
    cap = math.ceil(multiplier * float(all_counts.mean()))
    hessian_tokens = min(expert_tokens, cap)
    if chunk_capacity is not None:
        if chunk_capacity < 1:
            raise ValueError("chunk capacity must be positive")
        hessian_tokens = min(hessian_tokens, chunk_capacity)
        step = chunk_capacity
    else:
        step = max(expert_tokens, 1)
    chunks = [
        (s, min(expert_tokens, s + step)) for s in range(0, expert_tokens, step)
    ]
    return CapPlan(hessian_tokens=hessian_tokens, chunks=chunks)


@dataclass
class BlockResult:
    """Outcome of one block: per-expert routing counts, the quantized
    experts (when compression ran), solver fallbacks, layer objectives,
    and the tier transfer deltas for auditing."""

    expert_counts: np.ndarray
    quantized: list[TernaryMatrix | TwoBitMatrix] | None
    fallbacks: list[str | None] | None
    objectives: list[float] | None
    reads: np.ndarray
    writes: np.ndarray
    peak_occupancy: int


def make_dense_fn(dim: int, seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Fixed random linear map plus tanh, standing in for the dense part
    of the block."""
    rng = np.random.default_rng(seed)
    proj = (rng.normal(size=(dim, dim)) / math.sqrt(dim)).astype(np.float32)

    def dense(x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ proj)

    return dense


def run_block(
    buf: ListBuffer,
    dense_fn: Callable[[np.ndarray], np.ndarray],
    router: RouterSim,
    expert_weights: list[np.ndarray],
    tier: TierStore,
    *,
    compress: bool = True,
    mode: str = "gptq",
    bits: str = MODE_TERNARY,
    group_size: int = DEFAULT_GROUP_SIZE,
    cap_multiplier: float = 4.0,
    damping: float = DEFAULT_DAMPING,
    special_mask: np.ndarray | None = None,
) -> BlockResult:
    """Run one block over the whole buffer (see the module docstring).

    Expert weights must be square (dim x dim) so outputs can overwrite
    inputs in place. ``special_mask`` marks tokens (True) to exclude
    from Hessian accumulation; they are still routed and transformed.
    With ``compress`` off the raw weights are applied instead, which
    bounds how far the two settings can drift apart by the quantization
    error alone.
    """
    if mode not in ("rtn", "gptq"):
        raise ConfigError(f"unknown quantization mode {mode!r}")
    if group_size < 1:
        raise ConfigError("group_size must be positive")
    num_experts = len(expert_weights)
    if num_experts != router.num_experts:
        raise ConfigError("router and expert list disagree on expert count")
    for w in expert_weights:
        if w.shape != (buf.dim, buf.dim):
            raise ConfigError("experts must be square (dim x dim) matrices")
    if tier.num_tokens != buf.num_tokens:
        raise ConfigError("tier store does not match the buffer")
    if special_mask is not None:
        special_mask = np.asarray(special_mask, dtype=bool)
        if special_mask.shape != (buf.num_tokens,):
            raise ConfigError("special mask must cover every buffered token")

    reads0, writes0 = tier.counters()

    # dense phase: fetch sample, transform, route, write back
    for s in range(buf.num_samples):
        lo, hi = buf.sample_bounds(s)
        positions = np.arange(lo, hi)
        tier.stage_in(positions)
        transformed = dense_fn(buf.tokens[lo:hi])
        buf.assignments[lo:hi] = router.assign(transformed)
        buf.tokens[lo:hi] = transformed
        tier.stage_out(positions)

    counts = np.bincount(
        buf.assignments[buf.assignments >= 0], minlength=num_experts
    ).astype(np.int64)

    quantized: list | None = [] if compress else None
    fallbacks: list | None = [] if compress else None
    objectives: list[float] = []

    # sparse phase, one expert group at a time
    for g0 in range(0, num_experts, group_size):
        members = list(range(g0, min(num_experts, g0 + group_size)))
        budget = tier.fast_capacity // len(members)
        if budget < 1:
            raise ConfigError(
                f"fast capacity {tier.fast_capacity} cannot hold one token "
                f"per member of a {len(members)}-expert group"
            )
        gathered = []
        for e in members:
            x_e, pos_e = buf.gather_expert_tokens(e)
            plan = cap_tokens(len(pos_e), counts, cap_multiplier, chunk_capacity=budget)
            gathered.append((e, x_e, pos_e, plan))

        # first chunks stay resident together while Hessians build up
        for e, x_e, pos_e, plan in gathered:
            if plan.chunks:
                lo, hi = plan.chunks[0]
                tier.stage_in(pos_e[lo:hi])

        dequantized: dict[int, np.ndarray] = {}
        if compress:
            experts = []
            for e, x_e, pos_e, plan in gathered:
                h_tokens = x_e[: plan.hessian_tokens]
                h_mask = None
                if special_mask is not None:
                    h_mask = special_mask[pos_e[: plan.hessian_tokens]]
                experts.append(
                    Expert(
                        weights=expert_weights[e],
                        hessian=accumulate_hessian(h_tokens, mask=h_mask),
                    )
                )
            group = ExpertGroup(experts)
            if mode == "gptq":
                result = gptq_quantize(group, mode=bits, damping=damping)
                q_list = result.quantized
                f_list = list(result.fallbacks)
            else:
                q_list = [
                    rtn_quantize(w, make_grid(w, bits))
                    for w in (expert_weights[e] for e, *_ in gathered)
                ]
                f_list = [None] * len(members)
            quantized.extend(q_list)
            fallbacks.extend(f_list)
            for (e, *_), q in zip(gathered, q_list):
                dequantized[e] = q.dequant().astype(np.float32)

        for i, (e, x_e, pos_e, plan) in enumerate(gathered):
            w_eff = dequantized[e] if compress else np.asarray(
                expert_weights[e], dtype=np.float32
            )
            if compress:
                objectives.append(
                    reconstruction_objective(expert_weights[e], dequantized[e], x_e)
                )
            for k, (lo, hi) in enumerate(plan.chunks):
                if k > 0:
                    tier.stage_in(pos_e[lo:hi])
                y_chunk = x_e[lo:hi] @ w_eff.T
                buf.scatter_expert_outputs(pos_e[lo:hi], y_chunk)
                tier.stage_out(pos_e[lo:hi])

    reads1, writes1 = tier.counters()
    return BlockResult(
        expert_counts=counts,
        quantized=quantized,
        fallbacks=fallbacks,
        objectives=objectives if compress else None,
        reads=reads1 - reads0,
        writes=writes1 - writes0,
        peak_occupancy=tier.peak_occupancy,
    )


# --- run configuration ------------------------------------------------------

CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "num_experts": (int, 8),
    "group_size": (int, DEFAULT_GROUP_SIZE),
    "fast_capacity": (int, 4096),
    "cap_multiplier": (float, 4.0),
    "router_rule": (str, "hash"),
    "router_seed": (int, 0),
    "router_skew": (float, 0.0),
    "mask_special": (bool, False),
    "special_fraction": (float, 0.0),
    "hidden_dim": (int, 64),
    "num_samples": (int, 32),
    "tokens_per_sample": (int, 64),
    "data_seed": (int, 1),
    "weight_seed": (int, 2),
    "weight_scale": (float, 0.05),
    "dense_seed": (int, 3),
    "fallback_limit": (float, 1.0),
}


@dataclass
class RunConfig:
    """Typed view of the key-value run configuration."""

    num_experts: int = 8
    group_size: int = DEFAULT_GROUP_SIZE
    fast_capacity: int = 4096
    cap_multiplier: float = 4.0
    router_rule: str = "hash"
    router_seed: int = 0
    router_skew: float = 0.0
    mask_special: bool = False
    special_fraction: float = 0.0
    hidden_dim: int = 64
    num_samples: int = 32
    tokens_per_sample: int = 64
    data_seed: int = 1
    weight_seed: int = 2
    weight_scale: float = 0.05
    dense_seed: int = 3
    fallback_limit: float = 1.0

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError("num_experts must be positive")
        if self.router_rule not in ROUTER_RULES:
            raise ConfigError(f"router_rule must be one of {ROUTER_RULES}")
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim must be at least 2")
        if self.num_samples < 1 or self.tokens_per_sample < 1:
            raise ConfigError("need at least one sample and one token per sample")
        if self.tokens_per_sample > self.fast_capacity:
            raise ConfigError("a whole sample must fit in the fast tier")
        if not (0.0 <= self.special_fraction <= 1.0):
            raise ConfigError("special_fraction must lie in [0, 1]")
        if self.cap_multiplier <= 0:
            raise ConfigError("cap_multiplier must be positive")
        if not (0.0 <= self.fallback_limit <= 1.0):
            raise ConfigError("fallback_limit must lie in [0, 1]")


_BOOL_WORDS = {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}


def parse_config(text: str) -> RunConfig:
    """Parse the line-oriented ``key = value`` configuration format.

    Blank lines and ``#`` comments are ignored; booleans accept
    on/off/true/false/1/0; unknown keys are an error.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        typ, _default = CONFIG_SCHEMA[key]
        try:
            if typ is bool:
                if val.lower() not in _BOOL_WORDS:
                    raise ValueError(val)
                values[key] = _BOOL_WORDS[val.lower()]
            else:
                values[key] = typ(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    cfg = RunConfig(**values)  # type: ignore[arg-type]
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
