"""Command-line entry point: ``cmkd <verb> --config FILE [--seed N] [--output-dir DIR] [--resume]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing
teacher (or other upstream) artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, bundled_configs, load_config

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
VERBS = ("train-teacher", "distill", "evaluate", "probe", "analyze", "report", "run")

log = logging.getLogger("cmkd")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmkd", description="Cross-model knowledge distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="TOML file, or the name of a bundled config "
                                        f"({', '.join(bundled_configs()) or 'none'})")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--output-dir", help="override the config output_dir")
        s.add_argument("--resume", action="store_true", help="skip stages already completed")
        if verb == "report":
            s.add_argument("--formats", default="csv,json,plots")
    return p


def _report(args) -> int:
    from .report import ReportError, emit_report

    if args.output_dir:
        run_dir = Path(args.output_dir)
    elif args.config:
        run_dir = Path(load_config(args.config, seed=args.seed).output_dir)
    else:
        raise ConfigError("--output-dir", "report needs --output-dir or --config")
    try:
        result = emit_report(run_dir, formats=tuple(f for f in args.formats.split(",") if f))
    except ReportError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    for n in result["notices"]:
        print(f"notice: {n}")
    print(json.dumps(result["written"], indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .runner import MissingArtifact, OutputDirLocked, run_experiment
    from ..train import TrainingDiverged

    try:
        if args.verb == "report":
            return _report(args)
        if not args.config:
            raise ConfigError("--config", "required for this command")
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        out = run_experiment(cfg, verb=args.verb, resume=args.resume)
        print(f"{args.verb}: done ({out}, config hash {cfg.hash}, seed {cfg.seed})")
        return EXIT_OK
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (OutputDirLocked, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
