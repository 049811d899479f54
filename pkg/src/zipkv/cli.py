"""Command line entry point: ``zipkv {synth,simulate,compare,ratio}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import core
from .cache import SCHEMES, CacheConfig, Scheme, compression_report
from .harness import dumps_reports, load_config, run_compare, run_policy
from .policies import POLICIES, PolicyConfig
from .saliency import STRATEGIES, ProbeConfig


def _dims(text: str):
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be b,h,l,d integers, got {text!r}")
    if len(dims) != 4:
        raise argparse.ArgumentTypeError(f"dims must have 4 entries, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zipkv", description="Mixed-precision KV-cache compression simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic trace")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=core.PROFILES, default="uniform")
    s.add_argument("--dims", type=_dims, required=True, help="b,h,l,d")
    s.add_argument("--prefill", type=int, default=None)
    s.add_argument("--layers", type=int, default=1)
    s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run one policy over a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--policy", choices=POLICIES, required=True)
    s.add_argument("--k", type=int, default=4, help="uniform bit width")
    s.add_argument("--window", type=int, default=32, help="recent_window full-precision tokens")
    s.add_argument("--k-low", type=int, default=2)
    s.add_argument("--k-high", type=int, default=4)
    s.add_argument("--ratio", type=float, default=0.4, help="evict heavy-hitter fraction")
    s.add_argument("--recent", type=float, default=0.2, help="evict recent fraction")
    s.add_argument("--saliency-ratio", type=float, default=0.6)
    s.add_argument("--interval", type=int, default=100, help="recompression interval")
    s.add_argument("--probe-strategy", choices=STRATEGIES, default="hybrid")
    s.add_argument("--recent-fraction", type=float, default=0.05)
    s.add_argument("--random-fraction", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", default=None, help="write JSON here (default: stdout)")

    s = sub.add_parser("compare", help="run every policy in a TOML config")
    s.add_argument("--trace", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--report", default=None)

    s = sub.add_parser("ratio", help="closed-form compression ratio")
    s.add_argument("--scheme", choices=SCHEMES + ("baseline", "zipcache"), required=True)
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--hd", type=int, default=None, help="heads * head_dim")
    s.add_argument("--h", type=int, default=1)
    s.add_argument("--d", type=int, default=None)
    s.add_argument("--l", type=int, required=True)
    s.add_argument("--n", type=int, default=32, help="group size")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--k-high", type=int, default=4)
    s.add_argument("--k-low", type=int, default=2)
    s.add_argument("--saliency-ratio", type=float, default=0.6)
    s.add_argument("--json", action="store_true")
    return p


def _write(text: str, path) -> None:
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _cmd_synth(args) -> int:
    trace = core.synth_trace(args.seed, args.dims, args.profile, args.prefill, args.layers)
    core.save_trace(trace, args.out)
    print(f"wrote {args.out} sha256={core.trace_digest(trace)}")
    return 0


def _cmd_simulate(args) -> int:
    trace = core.load_trace(args.trace)
    probe = ProbeConfig(args.probe_strategy, args.recent_fraction, args.random_fraction, args.seed)
    cache = CacheConfig(args.k_high, args.k_low, args.saliency_ratio, args.interval, probe, args.seed)
    cfg = PolicyConfig(args.policy, k=args.k, window=args.window, k_low=args.k_low, ratio=args.ratio,
                       recent=args.recent, cache=cache, seed=args.seed)
    report = run_policy(trace, cfg)
    _write(dumps_reports([report]), args.report)
    return 0


def _cmd_compare(args) -> int:
    trace = core.load_trace(args.trace)
    reports = run_compare(trace, load_config(args.config))
    _write(dumps_reports(reports), args.report)
    return 1 if any(r.error for r in reports) else 0


def _cmd_ratio(args) -> int:
    if args.hd is not None:
        h, d = 1, args.hd
    elif args.d is not None:
        h, d = args.h, args.d
    else:
        raise ValueError("give --hd or --d (with optional --h)")
    scheme = Scheme(args.scheme, k=args.k, n=args.n, k_high=args.k_high, k_low=args.k_low,
                    saliency_ratio=args.saliency_ratio)
    rep = compression_report((args.b, h, args.l, d), scheme)
    if args.json:
        print(json.dumps(rep.to_dict()))
    else:
        print(f"scheme {args.scheme}: data_bits={rep.data_bits} param_bits={rep.param_bits} "
              f"bitmap_bits={rep.bitmap_bits} fp_buffer_bits={rep.fp_buffer_bits}")
        print(f"ratio {rep.ratio:.3f}")
    return 0


COMMANDS = {"synth": _cmd_synth, "simulate": _cmd_simulate, "compare": _cmd_compare, "ratio": _cmd_ratio}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"zipkv {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
