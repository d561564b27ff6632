"""Command line entry point.

One subcommand per pipeline stage. Exit codes: 0 on success, 1 for usage or
configuration problems, 2 for runtime failures (missing upstream artifacts,
numerical breakdown, unreadable files).
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .pipeline import (
    STAGES,
    ConfigError,
    PipelineError,
    config_errors,
    load_config,
    run_stage,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the contract here is 1
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="morphflow",
        description="synthetic mesh family pipeline: generate, map, detect, "
                    "transfer, factor, train, sample, fit, report",
    )
    parser.add_argument("--version", action="version",
                        version=f"morphflow {__version__}")
    sub = parser.add_subparsers(dest="stage", metavar="stage")
    helps = {
        "synth": "generate the synthetic mesh family, AU bank, and pools",
        "build-map": "barycentric map from the bank topology to the family topology",
        "detect-aus": "train per-AU spectral classifiers and score the test pool",
        "transfer": "retarget an expression onto a family mesh",
        "assemble": "stack family meshes into the shape tensor",
        "hosvd": "factor the tensor into a bilinear model and encode coefficients",
        "train-flows": "train the identity and expression flows",
        "sample": "draw coefficient samples and export meshes",
        "interpolate": "decode a latent path between two identities",
        "project": "project latent draws onto the confidence hyperellipsoid",
        "fit": "fit the model and flows to family target meshes",
        "report": "aggregate fitting errors and export meshes",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, help=helps[stage])
        p.add_argument("--config", default=None, metavar="PATH",
                       help="INI config file; defaults apply when omitted")
        p.add_argument("--seed", type=int, default=None, metavar="N",
                       help="override [pipeline] seed")
        p.add_argument("--stage-dir", default=None, metavar="PATH",
                       help="override [pipeline] stage_dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.stage is None:
        parser.print_usage(sys.stderr)
        print("error: a stage is required", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(["--seed must be >= 0"])
            cfg.set("pipeline", "seed", str(args.seed))
        if args.stage_dir is not None:
            cfg.set("pipeline", "stage_dir", args.stage_dir)
        problems = config_errors(cfg)
        if problems:
            for p in problems:
                print(f"config error: {p}", file=sys.stderr)
            return 1
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    stage_dir = cfg.get("pipeline", "stage_dir")
    try:
        manifest = run_stage(args.stage, cfg, stage_dir)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numerical or data failure inside a stage
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    n_out = len(manifest.get("outputs", {}))
    print(f"{args.stage}: wrote {n_out} files under {stage_dir}/{args.stage}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
