"""``cdm-forge <subcommand> --config <path> [--set key=value]...``

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numeric failure, 1 any other package error.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline as P
from .config import PRESETS, load_config
from .errors import CDMError

STAGE_COMMANDS = {
    "synth-data": "generate the synthetic dataset and seen/unseen split",
    "train-extractor": "train the feature extractor on seen classes",
    "train-ae": "fit the latent autoencoder (no-op weights in identity mode)",
    "stats": "per-class Gaussian statistics of seen-class features",
    "train-ldm": "train the conditional denoiser",
    "calibrate": "calibrate unseen-class statistics from K supports",
    "invert": "refine unseen statistics through the frozen denoiser",
    "generate": "sample data for every unseen class",
    "evaluate": "score generated data against held-out real items",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdm-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help=f"config file, or preset:<{'|'.join(PRESETS)}>")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", default=None, help="run directory (defaults to output_dir from the config)")
        return p

    for name, help_text in STAGE_COMMANDS.items():
        common(sub.add_parser(name, help=help_text))
    p = common(sub.add_parser("run-experiment", help="run every stage and write the metric report"))
    p.add_argument("--reuse", action="store_true", help="keep existing artifacts whose config hash matches")
    p = common(sub.add_parser("ablate-inversion", help="paired metrics with and without inversion"))
    p.add_argument("--fresh", action="store_true", help="rebuild upstream artifacts even if present")
    common(sub.add_parser("show-config", help="print the fully resolved config"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_text())
            return 0
        run = P.Run(cfg, args.out or cfg.output_dir)
        if args.command in STAGE_COMMANDS:
            if args.command == "synth-data":
                run.root.mkdir(parents=True, exist_ok=True)
            print(P.RUNNERS[args.command](run))
        elif args.command == "run-experiment":
            P.run_experiment(run, fresh=not args.reuse, log=log)
            print(run.path("evaluate"))
            sys.stdout.write(run.path("evaluate", "txt").read_text())
        elif args.command == "ablate-inversion":
            result = P.ablate_inversion(run, fresh=args.fresh, log=log)
            sys.stdout.write(result.summary())
    except CDMError as exc:
        print(f"cdm-forge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
