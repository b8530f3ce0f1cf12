"""Command-line entry point: ``tlcorrect <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, parse_config, preset
from .pipeline import STAGES, run_pipeline

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
U64 = 2**64


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return v


def _scale(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"scale must be a number, got {text!r}") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("scale must lie in (0, 1]")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--scale", type=_scale, help="shrink data counts and prior epochs (0 < s <= 1)")
    p.add_argument("--seed", type=_seed, help="master seed")
    p.add_argument("--out", type=Path, help="output directory (default: runs/<experiment>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlcorrect", description="Prior flow-map learning and transfer-learning correction.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p = sub.add_parser("reproduce", help="run a named preset end to end")
    p.add_argument("preset", choices=sorted(PRESETS))
    _common(p)
    p.add_argument("--stage", action="append", choices=STAGES,
                   help="run only this stage (repeatable); default runs all")
    sub.add_parser("presets", help="list the named presets")
    return parser


def _load(args, preset_name):
    if args.config is not None:
        cfg = parse_config(args.config, preset_name)
    elif preset_name is not None:
        cfg = preset(preset_name)
    else:
        raise ConfigError("give --config or --preset")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "reproduce":
            cfg = _load(args, args.preset)
            stages = args.stage
        else:
            cfg = _load(args, args.preset)
            stages = [args.command]
        out = args.out or Path("runs") / cfg.name
        manifest = run_pipeline(cfg, out, stages, scale=args.scale)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = manifest.get("stages", {}).get("evaluate", {}).get("info")
    if summary and (stages is None or "evaluate" in stages):
        print(json.dumps({k: summary[k] for k in ("prior_time_average", "posterior_time_average", "ratio",
                                                   "fraction_posterior_below")}, indent=1))
    print(f"outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
