"""Ternary expert compression: data-dependent quantization, a sub-1-bit
pair dictionary codec, and a calibration data-flow simulation."""

from .bf16 import bf16_bits_to_f32, bf16_round, f32_to_bf16_bits
from .codec import (
    CompressedMatrix,
    decompress,
    encode,
    fused_matvec,
    pad_to_even,
    read_checkpoint,
    simulate_warp_row,
    write_checkpoint,
)
from .dictionary import (
    Dictionary,
    PairDistribution,
    generate_dictionary,
    load_dictionary,
    pack_decode_words,
    save_dictionary,
    unpack_decode_words,
)
from .errors import (
    ConfigError,
    CorruptionError,
    DictionaryMismatchError,
    MoepackError,
    TierCapacityError,
)
from .pipeline import (
    BlockResult,
    CapPlan,
    ListBuffer,
    RouterSim,
    RunConfig,
    TierStore,
    cap_tokens,
    load_config,
    make_dense_fn,
    parse_config,
    run_block,
)
from .quantize import (
    Expert,
    ExpertGroup,
    GPTQResult,
    Hessian,
    QuantGrid,
    TernaryMatrix,
    TwoBitMatrix,
    accumulate_hessian,
    gptq_quantize,
    make_grid,
    reconstruction_objective,
    rtn_quantize,
)
from .stats import (
    RateReport,
    compression_rate,
    natural_sparsity,
    sample_ternary,
    theoretical_limit,
)

__all__ = [name for name in dir() if not name.startswith("_")]
