"""Command-line entry point: ``ceskd {score,distill,hypothesis,ablate,report}``."""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .config import parse_config, replace_seeds
from .exceptions import CESKDError


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or comma-separated list, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ceskd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds (overrides config)")
        p.add_argument("--out", help="run directory (overrides [experiment] out)")
        return p

    common(sub.add_parser("score", help="train the reference model and write the ranked curriculum"))
    p = common(sub.add_parser("distill", help="run the distillation path for every seed"))
    p.add_argument("--method", choices=["noKD", "blkd", "takd", "dgkd", "ceskd"])
    p.add_argument("--policy", choices=["baseline", "anti", "random"])
    common(sub.add_parser("hypothesis", help="tercile x expert BLKD grid"))
    common(sub.add_parser("ablate", help="expert selection policy ablation"))
    p = sub.add_parser("report", help="aggregate distill runs into report rows")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="experiment")
    p.add_argument("--threshold", type=float,
                   help="accuracy threshold for epochs_to_threshold (default: noKD mean)")
    return parser


def _resolve(args):
    text = Path(args.config).read_text(encoding="utf-8") if Path(args.config).exists() else None
    cfg = parse_config(args.config)
    if args.seed:
        cfg = replace_seeds(cfg, args.seed)
    if getattr(args, "policy", None):
        cfg = replace(cfg, curriculum=replace(cfg.curriculum, policy=args.policy))
    out = Path(args.out or cfg.experiment.out)
    experiment.write_config_copies(cfg, out, text)
    return cfg, out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            rows = experiment.run_report(args.out, args.name, args.threshold)
            print(experiment.report.render_table(rows), end="")
            return 0
        cfg, out = _resolve(args)
        if args.command == "score":
            print(experiment.run_score(cfg, out))
        elif args.command == "distill":
            results = experiment.run_distill(cfg, out, args.method)
            for seed, acc in results.items():
                print(f"seed {seed}: top1 {acc:.2f}")
        elif args.command == "hypothesis":
            experiment.run_hypothesis(cfg, out)
            print((out / "hypothesis.txt").read_text(), end="")
        elif args.command == "ablate":
            _, rows = experiment.run_ablate(cfg, out)
            print(experiment.report.render_table(rows), end="")
    except CESKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
