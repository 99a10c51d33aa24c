"""Command-line entry point: ``octcvd <stage> --out RUN_DIR``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from . import config as cfgmod
from . import pipeline as P
from .cohort import EYES
from .config import DATASET_IDS


def _ids(text):
    ids = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [i for i in ids if i not in DATASET_IDS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown dataset id {bad[0]!r}; choose from {', '.join(DATASET_IDS)}")
    return ids


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML file overriding the bundled defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--out", metavar="DIR", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="octcvd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    helps = {
        "synth": "generate patients and the VAE pretraining pool",
        "qi": "compute the quality index of every enrolled volume",
        "filter": "apply exclusion stages and split subjects",
        "train-vae": "train the per-eye VAEs on the pretraining pool",
        "encode": "write per-eye latent tables for the cohort",
        "assemble": "build the seven feature tables",
        "train-rf": "feature elimination, grid search and final forest per table",
        "evaluate": "test-set metrics, baseline risk scores and McNemar matrix",
        "explain": "latent perturbation, optical flow and layer attribution",
        "report": "collect tables for the run",
        "run-all": "run every stage in order",
    }
    parsers = {name: sub.add_parser(name, parents=[common], help=text, description=text)
               for name, text in helps.items()}
    parsers["synth"].add_argument("--write-volumes", action="store_true",
                                  help="also store every enrolled volume as a binary file")
    for name in ("train-vae", "encode"):
        parsers[name].add_argument("--eye", choices=EYES, action="append",
                                   help="restrict to one eye (repeatable)")
    for name in ("assemble", "train-rf", "evaluate"):
        parsers[name].add_argument("--configs", type=_ids, default=DATASET_IDS,
                                   help="comma-separated dataset ids (default: all seven)")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = cfgmod.load(args.config, seed=args.seed)
    except (cfgmod.ConfigError, OSError) as exc:
        print(f"octcvd: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        sys.stdout.write(cfg.dump())
        return 0
    try:
        run = P.RunDir(args.out).create(cfg)
    except (OSError, ValueError) as exc:
        print(f"octcvd: stage 'setup' failed: {exc}", file=sys.stderr)
        return 2

    kwargs = {}
    if args.command == "synth":
        kwargs["write_volumes"] = args.write_volumes
    elif args.command in ("train-vae", "encode") and args.eye:
        kwargs["eyes"] = tuple(dict.fromkeys(args.eye))
    elif args.command in ("assemble", "train-rf", "evaluate"):
        kwargs["ids"] = args.configs
    stages = P.STAGES if args.command == "run-all" else (args.command,)
    try:
        for stage in stages:
            P.run_stage(stage, run, cfg, **kwargs)
    except P.StageError as exc:
        print(f"octcvd: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
