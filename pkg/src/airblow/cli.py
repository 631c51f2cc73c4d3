"""Command-line entry point: ``airblow {train,eval,render,verify}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("airblow")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.parallel is not None:
        over["parallel"] = args.parallel
    return dataclasses.replace(cfg, **over).validate()


def cmd_train(args) -> int:
    from .experiment import run_training
    cfg = _load(args)
    res = run_training(cfg, log=log.info)
    log.info("wrote %s", res["checkpoint"])
    return 0


def cmd_eval(args) -> int:
    from .experiment import run_eval
    cfg = _load(args)
    table = run_eval(cfg, args.checkpoint, log=log.info)
    print(table.format())
    return 0


def cmd_render(args) -> int:
    from .env import EpisodeLog
    from .experiment import render_log
    with open(args.log) as fh:
        text = fh.read()
    # an episodes file holds several logs back to back, each ending in a summary line
    chunks, cur = [], []
    for line in text.splitlines():
        cur.append(line)
        if '"kind": "summary"' in line:
            chunks.append("\n".join(cur) + "\n")
            cur = []
    if not 0 <= args.episode < len(chunks):
        log.error("episode %d not in %s (%d episodes)", args.episode, args.log, len(chunks))
        return 2
    ep = EpisodeLog.from_jsonl(chunks[args.episode])
    written = render_log(ep, args.assets, args.out or "render")
    for p in written:
        print(p)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    checks = run_all(quick=not args.full)
    for c in checks:
        print(c.line())
    return 0 if all(c.ok for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airblow", description="Cloth unfolding with dual grasps and an air jet.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--parallel", type=int, help="worker processes for evaluation episodes")

    sp = sub.add_parser("train", help="pre-train and fine-tune the grasp and blow models")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate policy cells and write the results table")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint for learned cells")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="overlay logged actions on stored observations")
    sp.add_argument("--log", required=True, help="episodes JSONL file")
    sp.add_argument("--episode", type=int, default=0)
    sp.add_argument("--assets", required=True, help="directory of stored observation images")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("verify", help="run the invariant and gradient checks")
    sp.add_argument("--full", action="store_true", help="larger sample sizes")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("config error: %s", err)
        return 2
    except (FileNotFoundError, ValueError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
