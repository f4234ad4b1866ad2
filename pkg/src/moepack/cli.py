"""Command-line front end.

Subcommands own all state; every run reads its inputs, writes its
outputs, and exits. Exit codes: 0 success, 1 usage or configuration
error, 2 data corruption (including dictionary mismatch), 3 more solver
fallbacks than the configured limit allows.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .codec import (
    decompress,
    encode,
    fused_matvec,
    read_checkpoint,
    write_checkpoint,
)
from .dictionary import (
    DEFAULT_P0,
    PairDistribution,
    generate_dictionary,
    load_dictionary,
    save_dictionary,
)
from .errors import ConfigError, CorruptionError, DictionaryMismatchError, MoepackError
from .pipeline import ListBuffer, RouterSim, RunConfig, TierStore, load_config, make_dense_fn, run_block
from .quantize import MODE_TERNARY, TernaryMatrix
from .stats import compression_rate, natural_sparsity, sample_ternary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CORRUPT = 2
EXIT_FALLBACK = 3

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of calling exit()."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="moepack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dict", help="generate and save a dictionary")
    p.add_argument("--p0", type=float, default=DEFAULT_P0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dict)

    p = sub.add_parser("compress", help="quantize synthetic experts and encode them")
    p.add_argument("--config", required=True)
    p.add_argument("--dict", dest="dict_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("rtn", "gptq"), default="gptq")
    p.add_argument("--bits", choices=("ternary", "2bit"), default="ternary")
    p.add_argument("--report", help="also write the report as JSON")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="expand a checkpoint to a raw ternary dump")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--dict", dest="dict_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("matvec", help="fused decompress + matvec on a checkpoint")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--dict", dest="dict_path", required=True)
    p.add_argument("--x", required=True, help="input vector (.npy float)")
    p.add_argument("--y", required=True, help="output vector path (.npy)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_matvec)

    p = sub.add_parser("rates", help="report compression accounting for a checkpoint")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--dict", dest="dict_path", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("sample", help="draw an i.i.d. ternary matrix")
    p.add_argument("--p0", type=float, default=DEFAULT_P0)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional dump path (.npz)")
    p.set_defaults(func=cmd_sample)

    return parser


def cmd_gen_dict(args) -> int:
    dist = PairDistribution(args.p0)
    dist.require_dictionary_valid()
    dic = generate_dictionary(dist)
    save_dictionary(dic, args.out)
    print(f"entries = {len(dic)}")
    print(f"p0 = {dic.p0}")
    print(f"hash = {dic.hash64:#018x}")
    print(f"out = {args.out}")
    return EXIT_OK


def _build_run(cfg: RunConfig):
    """Deterministic synthetic layer: Gaussian samples, Gaussian experts."""
    data_rng = np.random.default_rng(cfg.data_seed)
    buf = ListBuffer(cfg.hidden_dim)
    for _ in range(cfg.num_samples):
        buf.append_sample(
            data_rng.normal(size=(cfg.tokens_per_sample, cfg.hidden_dim)).astype(
                np.float32
            )
        )
    weight_rng = np.random.default_rng(cfg.weight_seed)
    weights = [
        (weight_rng.normal(size=(cfg.hidden_dim, cfg.hidden_dim)) * cfg.weight_scale)
        .astype(np.float32)
        for _ in range(cfg.num_experts)
    ]
    router = RouterSim(
        num_experts=cfg.num_experts,
        rule=cfg.router_rule,
        seed=cfg.router_seed,
        skew=cfg.router_skew,
    )
    tier = TierStore(fast_capacity=cfg.fast_capacity, num_tokens=buf.num_tokens)
    dense = make_dense_fn(cfg.hidden_dim, cfg.dense_seed)
    mask = None
    if cfg.mask_special and cfg.special_fraction > 0:
        mask_rng = np.random.default_rng(cfg.data_seed + 1)
        mask = mask_rng.random(buf.num_tokens) < cfg.special_fraction
    return buf, dense, router, weights, tier, mask


def _stack_quantized(quantized) -> TernaryMatrix:
    codes = np.concatenate([q.codes for q in quantized], axis=0)
    minmax = np.concatenate([q.row_minmax for q in quantized], axis=0)
    return TernaryMatrix(codes=codes, row_minmax=minmax)


def cmd_compress(args) -> int:
    cfg = load_config(args.config)
    if args.bits == MODE_TERNARY and cfg.hidden_dim % 2 != 0:
        raise ConfigError("hidden_dim must be even for ternary encoding")
    dic = load_dictionary(args.dict_path)
    buf, dense, router, weights, tier, mask = _build_run(cfg)
    result = run_block(
        buf,
        dense,
        router,
        weights,
        tier,
        compress=True,
        mode=args.mode,
        bits=args.bits,
        group_size=cfg.group_size,
        cap_multiplier=cfg.cap_multiplier,
        special_mask=mask,
    )
    fallback_count = sum(1 for f in result.fallbacks if f is not None)
    fallback_fraction = fallback_count / cfg.num_experts

    report = {
        "mode": args.mode,
        "bits": args.bits,
        "num_experts": cfg.num_experts,
        "hidden_dim": cfg.hidden_dim,
        "tokens": int(buf.num_tokens),
        "expert_counts": result.expert_counts.tolist(),
        "fallbacks": result.fallbacks,
        "fallback_fraction": fallback_fraction,
        "objectives": result.objectives,
        "sparsity": float(
            np.mean([natural_sparsity(q) for q in result.quantized])
        ),
        "out": args.out,
    }

    if args.bits == MODE_TERNARY:
        stacked = _stack_quantized(result.quantized)
        compressed = encode(stacked, dic, workers=args.workers)
        write_checkpoint(compressed, args.out)
        rate = compression_rate(compressed)
        report["rate"] = rate.as_dict()
        report["rows_per_expert"] = cfg.hidden_dim
        report["dict_hash"] = f"{dic.hash64:#018x}"
        print(rate.as_text())
    else:
        # the pair codec is defined for ternary codes only; 2-bit runs
        # dump raw codes, no dictionary stream
        stacked_codes = np.concatenate([q.codes for q in result.quantized], axis=0)
        stacked_minmax = np.concatenate([q.row_minmax for q in result.quantized], axis=0)
        np.savez(args.out, codes=stacked_codes, row_minmax=stacked_minmax)

    print(f"mode = {args.mode}")
    print(f"bits = {args.bits}")
    print(f"sparsity = {report['sparsity']:.4f}")
    print(f"fallbacks = {fallback_count} / {cfg.num_experts}")
    print(f"mean_objective = {float(np.mean(result.objectives)):.6g}")
    print(f"out = {args.out}")

    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")

    if fallback_fraction > cfg.fallback_limit:
        print(
            f"fallback fraction {fallback_fraction:.2f} exceeds limit "
            f"{cfg.fallback_limit:.2f}",
            file=sys.stderr,
        )
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_decompress(args) -> int:
    dic = load_dictionary(args.dict_path)
    c = read_checkpoint(args.in_path)
    t = decompress(c, dic, workers=args.workers)
    np.savez(args.out, codes=t.codes, row_minmax=t.row_minmax)
    print(f"rows = {t.rows}")
    print(f"cols = {t.cols}")
    print(f"out = {args.out}")
    return EXIT_OK


def cmd_matvec(args) -> int:
    dic = load_dictionary(args.dict_path)
    c = read_checkpoint(args.in_path)
    x = np.load(args.x)
    if x.ndim != 1:
        raise UsageError("x must be a 1-d vector")
    y = fused_matvec(c, x.astype(np.float32), dic, workers=args.workers)
    np.save(args.y, y)
    print(f"rows = {len(y)}")
    print(f"out = {args.y}")
    return EXIT_OK


def cmd_rates(args) -> int:
    dic = load_dictionary(args.dict_path)
    c = read_checkpoint(args.in_path)
    if c.dict_hash != dic.hash64:
        raise DictionaryMismatchError(
            "checkpoint was encoded against a different dictionary"
        )
    report = compression_rate(c)
    if args.json:
        print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    else:
        print(report.as_text())
    return EXIT_OK


def cmd_sample(args) -> int:
    t = sample_ternary(PairDistribution(args.p0), args.rows, args.cols, args.seed)
    print(f"rows = {t.rows}")
    print(f"cols = {t.cols}")
    print(f"sparsity = {natural_sparsity(t):.6f}")
    if args.out:
        np.savez(args.out, codes=t.codes, row_minmax=t.row_minmax)
        print(f"out = {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DictionaryMismatchError as exc:
        print(f"dictionary mismatch: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except CorruptionError as exc:
        print(f"corrupt data: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MoepackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
