"""Command-line entry point.

    cotprune run-all --config cfg.json [--outdir DIR]
    cotprune generate|train|flipsets|curvature|influence|score|prune|retrain|
             eval|loo|report ...

Every subcommand reads the same JSON experiment config (all fields optional;
defaults reproduce the standard corrupted-corpus study) and executes one stage
for every configured seed, reusing cached artifacts. Exit code is 0 on
success; on failure the failing stage is printed and the exit code is 1.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import CotPruneError
from .pipeline import ExperimentConfig, Runner, StageFailure, loo_oracle, run_experiment


def load_config(path: str | None, outdir: str | None) -> ExperimentConfig:
    if path:
        with open(path, "r", encoding="utf-8") as f:
            cfg = ExperimentConfig.from_json(json.load(f))
    else:
        cfg = ExperimentConfig()
    if outdir:
        cfg.outdir = outdir
    return cfg


def _add_common(p):
    p.add_argument("--config", help="experiment config JSON", default=None)
    p.add_argument("--outdir", help="override the output directory", default=None)


STAGE_COMMANDS = {
    "generate": lambda r, s: r.stage_corpus(s),
    "train": lambda r, s: r.stage_finetune(s),
    "flipsets": lambda r, s: r.stage_flips(s),
    "curvature": lambda r, s: r.stage_basis(s),
    "influence": lambda r, s: r.stage_matrix(s),
    "score": lambda r, s: r.stage_scores(s),
    "prune": lambda r, s: r.stage_prune(s),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cotprune",
        description="influence-based pruning of chain-of-thought training data")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in list(STAGE_COMMANDS) + ["retrain", "eval", "report", "run-all"]:
        p = sub.add_parser(name)
        _add_common(p)
        if name in ("retrain", "eval"):
            p.add_argument("--strategy", required=True)

    p = sub.add_parser("loo")
    _add_common(p)
    p.add_argument("--candidates", required=True,
                   help="comma-separated training example ids")
    p.add_argument("--mode", choices=["convex_head", "full_retrain"],
                   default="convex_head")

    args = parser.parse_args(argv)
    cfg = load_config(args.config, args.outdir)
    try:
        if args.command == "run-all":
            report = run_experiment(cfg)
            print(f"wrote report for {len(report.rows)} (strategy, seed) runs "
                  f"to {cfg.outdir}")
            return 0
        runner = Runner(cfg)
        if args.command in STAGE_COMMANDS:
            for s in cfg.seeds:
                STAGE_COMMANDS[args.command](runner, s)
                print(f"seed {s}: {args.command} done")
            return 0
        if args.command in ("retrain", "eval"):
            for s in cfg.seeds:
                if args.command == "retrain":
                    runner.stage_retrain(s, args.strategy)
                else:
                    doc = runner.stage_eval(s, args.strategy)
                    print(json.dumps(doc, sort_keys=True))
            return 0
        if args.command == "loo":
            ids = [int(x) for x in args.candidates.split(",") if x != ""]
            deltas = loo_oracle(cfg, ids, mode=args.mode)
            print(json.dumps({"candidate_ids": ids,
                              "deltas": [float(d) for d in deltas]}))
            return 0
        if args.command == "report":
            report = run_experiment(cfg)
            print(f"report written to {cfg.outdir}")
            return 0
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CotPruneError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
