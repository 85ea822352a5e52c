"""Command-line front end: one subcommand per pipeline stage plus ``demo``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import load_config
from .model import ConfigError, NumericalError
from .pipeline import STAGES, MissingPrerequisite, Pipeline, run_demo

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_NUMERIC = 4


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML config file")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="upper bound on worker threads")
    p.add_argument("--workdir", default=d, help="override paths.workdir")
    p.add_argument("--set", dest="overrides", action="append", metavar="SECTION.KEY=VALUE",
                   default=argparse.SUPPRESS if suppress else [], help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovpano",
                                     description="Open-vocabulary panoptic segmentation of point clouds")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="stage", required=True)
    helps = {
        "render": "render views of the cloud from a grid rig",
        "filter": "keep views the embedding provider judges coherent",
        "lift": "lift pixel features onto points, adding views until coverage is reached",
        "label": "derive pseudo-classes and pseudo-instances",
        "partition": "build the superpoint hierarchy",
        "train": "train the mixture-of-experts model",
        "infer": "predict per-point vectors and instances",
        "query": "score points against a text prompt",
        "eval": "score predictions against ground truth",
        "demo": "generate the synthetic scene and run every stage",
    }
    for name in (*STAGES, "demo"):
        sp = sub.add_parser(name, help=helps[name])
        _global_flags(sp, suppress=True)
        if name == "query":
            sp.add_argument("--text", help="query prompt (default: query.text)")
            sp.add_argument("--threshold", type=float, help="similarity threshold (default: query.threshold)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workdir is not None:
        overrides.append(f"paths.workdir={json.dumps(args.workdir)}")
    try:
        cfg = load_config(args.config, overrides)
        if args.stage == "demo":
            result = run_demo(cfg, args.threads)
        else:
            kwargs = {}
            if args.stage == "query":
                kwargs = {"text": args.text, "threshold": args.threshold}
            result = Pipeline(cfg, args.threads).run(args.stage, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
