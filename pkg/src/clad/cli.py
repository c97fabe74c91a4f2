"""Command-line entry point.

Subcommands: gen-data, train-stage1, train-stage2, eval, ablate, diagnose.
Exit codes: 0 ok, 2 usage, 3 precondition, 4 runtime/numeric. The default
output root comes from $CLAD_OUT_ROOT (falls back to ./runs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, RunConfig
from .errors import NumericError, PreconditionError, UsageError
from .sim.dataset import DatasetError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_RUNTIME = 4


def _out_root() -> Path:
    return Path(os.environ.get("CLAD_OUT_ROOT", "runs"))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clad", description=__doc__)
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="path to a config JSON (overrides preset)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, e.g. ddpm.K=50")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a demonstration dataset")
    g.add_argument("--tasks", default="0,1,2")
    g.add_argument("--episodes-per-task", required=True,
                   help="episode count, or comma list matching --tasks")
    g.add_argument("--action-noise", type=float, default=0.0,
                   help="std of Gaussian exploration noise added to expert actions")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    t1 = sub.add_parser("train-stage1", help="train dynamics + foresight")
    t1.add_argument("--dataset", required=True)
    t1.add_argument("--out")

    t2 = sub.add_parser("train-stage2", help="train the diffusion policy")
    t2.add_argument("--dataset", required=True)
    t2.add_argument("--stage1-checkpoint", required=True)
    t2.add_argument("--out")

    ev = sub.add_parser("eval", help="closed-loop evaluation of a trained policy")
    ev.add_argument("--stage1-checkpoint", required=True)
    ev.add_argument("--stage2-checkpoint", required=True)
    ev.add_argument("--task", type=int, required=True)
    ev.add_argument("--rollouts", type=int, default=50)
    ev.add_argument("--out")

    ab = sub.add_parser("ablate", help="train + evaluate the ablation grid")
    ab.add_argument("--dataset", required=True)
    ab.add_argument("--tasks", default="2")
    ab.add_argument("--out")

    dg = sub.add_parser("diagnose", help="representation collapse/grounding report")
    dg.add_argument("--stage1-checkpoint", required=True)
    dg.add_argument("--dataset", required=True)
    dg.add_argument("--samples-per-task", type=int, default=256)
    dg.add_argument("--out")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _parse_tasks(spec: str) -> list[int]:
    try:
        return [int(x) for x in spec.split(",") if x.strip() != ""]
    except ValueError as e:
        raise UsageError(f"bad task list {spec!r}") from e


def _run(args) -> int:
    from . import training
    from .sim.dataset import generate_dataset

    cfg = _resolve_config(args)

    if args.command == "gen-data":
        out = generate_dataset(
            args.out, _parse_tasks(args.tasks),
            _parse_tasks(args.episodes_per_task) if "," in args.episodes_per_task
            else int(args.episodes_per_task),
            cfg.seed, episode_len=cfg.env.episode_len, dt=cfg.env.dt,
            a_max=cfg.env.a_max, action_noise=args.action_noise, force=args.force,
        )
        print(f"dataset written to {out}")
        return EXIT_OK

    if args.command == "train-stage1":
        cfg.dataset = args.dataset
        out = Path(args.out) if args.out else _out_root() / "stage1"
        ckpt = training.train_stage1(cfg, out)
        print(f"stage-1 checkpoint: {ckpt}")
        return EXIT_OK

    if args.command == "train-stage2":
        cfg.dataset = args.dataset
        out = Path(args.out) if args.out else _out_root() / "stage2"
        ckpt = training.train_stage2(cfg, args.stage1_checkpoint, out)
        print(f"stage-2 checkpoint: {ckpt}")
        return EXIT_OK

    if args.command == "eval":
        from .eval_diag import evaluate
        from .rollout import PolicyActor, PolicyBundle

        stage1, _, _ = training.load_stage1(args.stage1_checkpoint)
        policy, pcfg, _ = training.load_stage2(args.stage2_checkpoint)
        bundle = PolicyBundle(stage1=stage1, policy=policy, config=pcfg)
        out = Path(args.out) if args.out else _out_root() / "eval"
        out.mkdir(parents=True, exist_ok=True)
        pcfg.save(out / "config.json")
        report = evaluate(
            PolicyActor(bundle), args.task, args.rollouts, cfg.seed,
            episode_len=pcfg.env.episode_len, dt=pcfg.env.dt, a_max=pcfg.env.a_max,
            records_path=out / f"rollouts_task{args.task}.jsonl",
        )
        print(json.dumps(dataclasses.asdict(report), indent=2))
        return EXIT_OK

    if args.command == "ablate":
        from .eval_diag import render_ablation_table, run_ablations

        cfg.dataset = args.dataset
        out = Path(args.out) if args.out else _out_root() / "ablations"
        grid = run_ablations(cfg, out, task_ids=_parse_tasks(args.tasks))
        print(render_ablation_table(grid))
        return EXIT_OK

    if args.command == "diagnose":
        from .eval_diag import diagnose_representation
        from .sim.dataset import load_dataset

        stage1, _, _ = training.load_stage1(args.stage1_checkpoint)
        data = load_dataset(args.dataset)
        out = Path(args.out) if args.out else _out_root() / "diagnostics"
        report = diagnose_representation(
            stage1, data, n_per_task=args.samples_per_task, seed=cfg.seed, out_dir=out
        )
        print(json.dumps(report, indent=2))
        return EXIT_OK

    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PreconditionError as exc:
        print(f"precondition error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except DatasetError as exc:
        print(f"precondition error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except FileNotFoundError as exc:
        print(f"precondition error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
