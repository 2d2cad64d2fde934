"""Command line entry point.

Subcommands:
  pretrain        intrinsic-only agent pretraining, saves a checkpoint
  run             the full selection/fine-tuning loop into a run directory
  gen-fixed-set   seeded validation/test set generation (prints the digest)
  eval            score a judge checkpoint on a fixed set with breakdowns
  export-plots    flatten report.json/metrics.csv into plot-ready CSVs
  replay          re-derive relations from samples.jsonl and verify captions

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
stderr; machine-readable output goes to stdout or into the run directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import datasets, orchestrator
from .orchestrator import ConfigError, RunConfig, apply_overrides, config_from_dict
from .scene import PlacementEnv


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="rls3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(p, run_dir=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, repeatable",
        )
        p.add_argument("--judge", help="generative | contrastive | external:<addr>")
        p.add_argument("--agent", choices=("sac", "random"))
        p.add_argument("--budget", type=int, help="generation-attempt cap")
        if run_dir:
            p.add_argument(
                "--run-dir",
                default=os.environ.get("RLS3_RUN_DIR"),
                help="output directory (default: $RLS3_RUN_DIR)",
            )

    p = sub.add_parser("pretrain", help="intrinsic-only agent pretraining")
    common(p)
    p.add_argument("--steps", type=int, help="override pretrain_steps")

    p = sub.add_parser("run", help="full loop")
    common(p)

    p = sub.add_parser("gen-fixed-set", help="seeded fixed evaluation set")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--scenes", default="train", help="train | test | path to a suite file")
    p.add_argument("--out", default="fixed_set.jsonl", help="file name inside the run dir")

    p = sub.add_parser("eval", help="judge on a fixed set with breakdowns")
    common(p)
    p.add_argument("--samples", required=True, help="JSONL sample file")
    p.add_argument("--judge-checkpoint", help="directory saved by a run")

    p = sub.add_parser("export-plots", help="plot-ready CSVs from a run directory")
    common(p)

    p = sub.add_parser("replay", help="verify samples.jsonl against the geometry")
    common(p)
    p.add_argument("--samples", help="explicit JSONL path (default: run dir samples.jsonl)")

    return parser


def _load_config(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            doc = json.load(f)
        doc.pop("digest", None)
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.judge is not None:
        doc["judge"] = args.judge
    if args.agent is not None:
        doc["agent"] = args.agent
    if args.budget is not None:
        doc["budget"] = args.budget
    if overrides:
        doc = apply_overrides(doc, overrides)
    return config_from_dict(doc)


def _require_run_dir(args) -> Path:
    if not args.run_dir:
        raise UsageError("--run-dir is required (or set RLS3_RUN_DIR)")
    return Path(args.run_dir)


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    run_dir = _require_run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    steps = args.steps if args.steps is not None else config.pretrain_steps
    seq = np.random.SeedSequence(config.seed)
    env_seed, agent_seed = seq.spawn(2)
    env = PlacementEnv(
        orchestrator.resolve_suite(config.train_suite),
        config.samples_per_episode,
        seed=env_seed,
        dmax=config.dmax,
        snap_tol=config.snap_tol,
        p_swap=config.p_swap,
    )
    agent = agent_mod.SacAgent(
        seed=agent_seed,
        hidden=config.agent_hidden,
        lr=config.agent_lr,
        gamma=config.gamma,
        polyak=config.polyak,
        alpha=config.alpha,
        warmup=config.warmup,
        minibatch=config.agent_minibatch,
        buffer_capacity=config.buffer_capacity,
    )
    stats = agent_mod.pretrain_intrinsic(
        agent, env, steps, update_every=config.pretrain_update_every
    )
    agent.save(run_dir / "agent")
    print(json.dumps(stats, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args)
    run_dir = _require_run_dir(args)
    report = orchestrator.run_loop(config, run_dir)
    if report.failure:
        print(f"run failed: {report.failure}", file=sys.stderr)
        return 2
    print(json.dumps({"run_dir": str(run_dir), "test_metric": report.test_metric}))
    return 0


def _cmd_gen_fixed_set(args) -> int:
    config = _load_config(args)
    run_dir = _require_run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    suite = orchestrator.resolve_suite(args.scenes)
    out = run_dir / args.out
    digest = datasets.generate_fixed_set(suite, args.count, config.seed, out)
    print(json.dumps({"path": str(out), "count": args.count, "digest": digest}))
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    run_dir = _require_run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    records = datasets.read_samples(args.samples)
    suite = orchestrator.resolve_suite(config.train_suite)
    judge = orchestrator.make_judge(config, suite.catalog_names, config.seed)
    if args.judge_checkpoint:
        if not hasattr(judge, "load"):
            raise UsageError("external judges do not take local checkpoints")
        judge.load(args.judge_checkpoint)
    if judge.kind == "contrastive":
        verdicts, loss = judge.infer(records)
        summary = {"loss": loss, "retrieval_accuracy": judge.validation_metric(records)}
    else:
        verdicts = judge.infer(records)
        summary = {"mean_rubric": judge.validation_metric(records)}
    doc = {
        "metric": summary,
        "per_term": datasets.breakdown_to_dict(datasets.per_term_breakdown(verdicts, records)),
        "per_complexity": datasets.breakdown_to_dict(
            datasets.complexity_breakdown(verdicts, records)
        ),
    }
    with open(run_dir / "eval.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_export_plots(args) -> int:
    run_dir = _require_run_dir(args)
    paths = datasets.export_plot_data(run_dir)
    print(json.dumps({"written": [str(p) for p in paths]}))
    return 0


def _cmd_replay(args) -> int:
    if args.samples:
        path = Path(args.samples)
    else:
        path = _require_run_dir(args) / "samples.jsonl"
    records = datasets.read_samples(path)
    bad = datasets.replay_verify(records)
    if bad is not None:
        idx, reason = bad
        print(f"replay mismatch at record id {records[idx].id}: {reason}", file=sys.stderr)
        return 2
    print(json.dumps({"records": len(records), "consistent": True}))
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "run": _cmd_run,
    "gen-fixed-set": _cmd_gen_fixed_set,
    "eval": _cmd_eval,
    "export-plots": _cmd_export_plots,
    "replay": _cmd_replay,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.subcommand](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        OSError,
        json.JSONDecodeError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
