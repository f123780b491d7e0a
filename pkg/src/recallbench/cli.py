"""Command line entry point: ``recallbench <stage> --config <path>``."""
import argparse
import logging
import sys

from .errors import ConfigError, StageError
from .pipeline import STAGES, Experiment, load_config


def build_parser():
    parser = argparse.ArgumentParser(prog="recallbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage")
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--only", help="glob over cell ids, e.g. 'attack/RL/*'")
        p.add_argument("--seed", type=int, help="override the config's global seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for unlearn/attack cells")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        exp = Experiment(cfg)
        if args.command == "all":
            stages = STAGES
        else:
            # prepare is cheap when cached and re-checks the split manifest
            stages = tuple(dict.fromkeys(("prepare", args.command)))
        for stage in stages:
            exp.run_stage(stage, only=args.only, jobs=args.jobs)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"recallbench: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"recallbench: {exc}", file=sys.stderr)
        return 1
    done = {}
    for e in exp.events:
        done[e["status"]] = done.get(e["status"], 0) + 1
    print(f"{exp.dir}: " + ", ".join(f"{v} {k}" for k, v in sorted(done.items())))
    return 0
