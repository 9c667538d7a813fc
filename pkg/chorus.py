#!/usr/bin/env python3
"""
Chorus command-line entry point.
Verbs: generate, shift, pretrain, customize, evaluate, stream, experiment, probe.
Every verb prints a JSON result record and exits non-zero on failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

# Add src to path for package imports
src_path = str(Path(__file__).parent / 'src')
sys.path.insert(0, src_path)

from general.errors import error_record
from runtime.commands import (cmd_customize, cmd_evaluate, cmd_experiment, cmd_generate, cmd_pretrain,
                              cmd_probe, cmd_shift, cmd_stream)
from runtime.config import apply_runtime, load_config
from runtime.storage import canonical_json

logger = logging.getLogger("chorus")

VERBS = ["generate", "shift", "pretrain", "customize", "evaluate", "stream", "experiment", "probe"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Chorus context-aware customization pipeline')
    parser.add_argument('verb', choices=VERBS, help='Pipeline stage to run')
    parser.add_argument('--config', default=None, help='YAML run configuration (defaults when omitted)')
    parser.add_argument('--seed', type=int, default=None, help='Override the run and data seed')
    parser.add_argument('--out', default=None, help='Output directory (overrides paths.out_dir)')
    parser.add_argument('--force', action='store_true', help='Overwrite existing outputs')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--capacity', type=int, default=None, help='stream: context cache capacity')
    parser.add_argument('--no-cache', action='store_true', help='stream: disable the context cache')
    parser.add_argument('--canonical', action='store_true', help='stream: zero timing fields in outputs')
    parser.add_argument('--trace', default=None, help='stream: replay this trace file instead of generating one')
    parser.add_argument('--untrained', action='store_true', help='evaluate: use a freshly initialized head')
    parser.add_argument('--sweep', default=None, choices=['budget', 'batch_size', 'dropout', 'lr'],
                        help='experiment: run a budget or sensitivity sweep instead of the plan')
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        overrides = {
            "seed": args.seed,
            "data.seed": args.seed,
            "paths.out_dir": args.out,
            "stream.capacity": args.capacity,
            "stream.no_cache": True if args.no_cache else None,
        }
        config = apply_runtime(load_config(args.config, overrides))
    except Exception as e:
        logger.error(f"❌ Invalid configuration: {e}")
        print(json.dumps(error_record(e)))
        return 2

    if args.verb == "generate":
        result = cmd_generate(config, force=args.force)
    elif args.verb == "shift":
        result = cmd_shift(config, force=args.force)
    elif args.verb == "pretrain":
        result = cmd_pretrain(config, force=args.force)
    elif args.verb == "customize":
        result = cmd_customize(config, force=args.force)
    elif args.verb == "evaluate":
        result = cmd_evaluate(config, force=args.force, untrained=args.untrained)
    elif args.verb == "stream":
        result = cmd_stream(config, force=args.force, canonical=args.canonical, trace=args.trace)
    elif args.verb == "experiment":
        result = cmd_experiment(config, force=args.force, sweep=args.sweep)
    else:
        result = cmd_probe(config, force=args.force)

    print(canonical_json(result))
    return 0 if result.get("success") else 1


if __name__ == "__main__":
    sys.exit(run())
