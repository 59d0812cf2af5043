"""Command-line entry point: ``hideseek <command> [--config F] [--seed N] [--out DIR] [--jobs N]``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import pipeline

COMMANDS = {
    "generate": "generate the phantom dataset",
    "train": "fit the latent models and the classifier",
    "segment": "segment the test set with the method and baselines",
    "evaluate": "compute metrics and comparison tables",
    "ablate": "fidelity, Delta-vs-probability and projection ablations",
    "run-all": "every stage in one process",
    "render": "color overlays of the segmentations",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help=f"output directory (else ${pipeline.OUT_ENV}, else config)")
    common.add_argument("--jobs", type=int, help="worker threads for per-sample work")
    common.add_argument("--set", dest="settings", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting, e.g. phantom.noise_sigma=0.01 (repeatable)")
    parser = argparse.ArgumentParser(prog="hideseek", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        p = sub.add_parser(name, help=help_, parents=[common])
        if name == "run-all":
            p.add_argument("--write-data", action="store_true", help="also write the full dataset")
    return parser


def load_config(args) -> pipeline.ExperimentConfig:
    settings = pipeline.read_config_file(args.config) if args.config else {}
    settings.update(pipeline.parse_settings(args.settings))
    cfg = pipeline.build_config(settings)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    return pipeline.resolve_out(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"hideseek: [config] {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run-all":
            m = pipeline.run_experiment(cfg, write_data=args.write_data)
            print(f"run complete: {cfg.out} (config {m.config_hash})")
        else:
            pipeline.cli_stage(cfg, args.command)
            print(f"{args.command} complete: {cfg.out}")
    except pipeline.StageError as exc:
        print(f"hideseek: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
