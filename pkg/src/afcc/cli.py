"""Command line: ``afcc <stage> --config cfg.json [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import SCHEMES, STAGES, ExperimentConfig, MissingPrerequisite, run_stage


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afcc", description="Cluster-guided connection pruning pipeline.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--field-set", choices=("train", "test"))
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--threshold", type=float, help="conv clipping threshold")
    p.add_argument("--layer", type=int, help="restrict analyze/render to one probed layer")
    p.add_argument("--output-dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = ExperimentConfig.load(args.config).override(
            seed=args.seed, field_set=args.field_set, scheme=args.scheme, conv_threshold=args.threshold, output_dir=args.output_dir
        )
        result = run_stage(config, args.stage, layer=args.layer)
    except (MissingPrerequisite, FileNotFoundError, ValueError) as e:
        print(f"afcc {args.stage}: {e}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in result.items() if k in ("dir", "test_accuracy", "accuracy", "dilution", "summary")}
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
