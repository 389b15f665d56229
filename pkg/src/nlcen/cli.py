"""Command-line entry point: ``nlcen {synth,train,eval,sweep,ablate}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .segnet import VARIANTS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="overrides [run] seed (also seeds synthetic data)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--intensities", type=harness.parse_intensities, help="comma-separated epsilons")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nlcen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset to --out")
    sub.add_parser("train", parents=[common], help="train one variant")
    for name, text in (("eval", "clean DIC/JSC on the test split"), ("sweep", "accuracy under attack per epsilon")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="defaults to <out>/checkpoint.nlck")
        sp.add_argument("--dataset", help="dataset directory (overrides [data] path)")
    sub.add_parser("ablate", parents=[common], help="five-stage ablation protocol with sweeps")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = harness.load_config(args.config, seed=args.seed, out=args.out, variant=args.variant,
                                  intensities=args.intensities)
        if args.command == "synth":
            print(harness.cmd_synth(cfg))
        elif args.command == "train":
            print(harness.cmd_train(cfg).manifest)
        elif args.command == "eval":
            print(harness.cmd_eval(cfg, args.checkpoint, args.dataset).metrics)
        elif args.command == "sweep":
            print(harness.cmd_sweep(cfg, args.checkpoint, args.dataset).sweep)
        elif args.command == "ablate":
            print(harness.cmd_ablate(cfg).artifacts.sweep)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"nlcen {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
