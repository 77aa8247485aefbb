"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 artifact I/O error, 3 invariant
violation. All flags can also come from a key = value config file via
--config; the artifact root comes from --root or the LATENTMEM_ROOT
environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import env as E
from . import pipeline as P
from .config import parse_config_file
from .errors import ArtifactError, ConfigError, ContractError, InvariantError, LatentMemError
from .runtime import MODES, RunSettings

USAGE_EXIT, ARTIFACT_EXIT, INVARIANT_EXIT = 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentmem", description=__doc__)
    parser.add_argument("--root", default=None, help="artifact root directory")
    parser.add_argument("--config", default=None, help="key = value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-tasks", help="generate task-set files")
    sub.add_parser("pretrain-policy", help="behavior-clone and freeze the policy")
    sub.add_parser("build-bank", help="build the trajectory bank with retrieval keys")
    s1 = sub.add_parser("train-stage1", help="self-distillation training of the compressor")
    s1.add_argument("--updates", type=int, default=None)
    s2 = sub.add_parser("train-stage2", help="outcome-aware RLOO training of the compressor")
    s2.add_argument("--updates", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate one memory mode")
    ev.add_argument("--mode", choices=MODES, default="full")
    ev.add_argument("--m", type=int, default=5)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--stage", choices=("1", "2"), default="2")
    ev.add_argument("--check-cache", action="store_true")
    ev.add_argument("--out", default=None)

    sub.add_parser("ablate", help="4-mode x 3-seed ablation study")
    sub.add_parser("sweep-m", help="retrieval-budget sweep")
    sub.add_parser("sweep-bank", help="bank-size sweep")
    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sub.add_parser("bench", help="wall-time microbenchmarks")
    sub.add_parser("run-all", help="full pipeline: tasks, pretrain, bank, both stages")
    return parser


def _pipeline_cfg(args) -> P.PipelineDefaults:
    """Pipeline defaults, overridable from a key = value config file."""
    cfg = P.PipelineDefaults()
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple):
                value = tuple(int(x) for x in value.split(","))
            else:
                value = type(current)(value)
            setattr(cfg, key, value)
    return cfg


def _load_eval_inputs(args, stage: str):
    root = args.root
    policy = P.load_policy(root)
    bank = P.load_bank(root)
    p = P.paths(root)
    phi_path = p["phi_stage2"] if stage == "2" else p["phi_stage1"]
    phi = P.load_compressor(phi_path)
    return policy, bank, phi


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, ContractError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return USAGE_EXIT
    except ArtifactError as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return ARTIFACT_EXIT
    except InvariantError as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return INVARIANT_EXIT
    except LatentMemError as err:
        print(f"error: {err}", file=sys.stderr)
        return INVARIANT_EXIT


def _dispatch(args) -> int:
    root = args.root
    cfg = _pipeline_cfg(args)

    if args.command == "gen-tasks":
        P.gen_tasks(root, cfg)
        print("task sets written")
        return 0
    if args.command == "pretrain-policy":
        _, report = P.pretrain(root, cfg)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    if args.command == "build-bank":
        bank = P.build_bank(root, cfg)
        print(f"bank built: {len(bank)} entries")
        return 0
    if args.command == "train-stage1":
        if args.updates is not None:
            cfg.stage1_updates = args.updates
        P.stage1(root, cfg)
        print("stage-1 compressor saved")
        return 0
    if args.command == "train-stage2":
        if args.updates is not None:
            cfg.stage2_updates = args.updates
        P.stage2(root, cfg)
        print("stage-2 compressor saved")
        return 0
    if args.command == "eval":
        from .evaluate import evaluate

        policy, bank, phi = _load_eval_inputs(args, args.stage)
        tasks = E.load_tasks(P.paths(root)["eval_tasks"][args.seed])
        settings = RunSettings(mode=args.mode, m=args.m, check_cache=args.check_cache)
        out = args.out or (P.paths(root)["reports"] / f"eval-{args.mode}-seed{args.seed}.jsonl")
        use_phi = None if args.mode == "vanilla" else phi
        use_bank = None if args.mode == "vanilla" else bank
        rep = evaluate(policy, use_phi, use_bank, tasks, settings, record_path=out)
        print(json.dumps(rep.aggregates, indent=2, sort_keys=True))
        return 0
    if args.command == "ablate":
        from .evaluate import ablate

        policy, bank, phi = _load_eval_inputs(args, "2")
        task_sets = {
            s: E.load_tasks(path)
            for s, path in zip(cfg.eval_seeds, P.paths(root)["eval_tasks"])
        }
        out = P.paths(root)["reports"] / "ablation"
        result = ablate(policy, phi, bank, task_sets, out)
        print((out / "comparison.txt").read_text())
        return 0
    if args.command == "sweep-m":
        from .evaluate import sweep_m

        policy, bank, phi = _load_eval_inputs(args, "2")
        task_sets = {
            s: E.load_tasks(path)
            for s, path in zip(cfg.eval_seeds, P.paths(root)["eval_tasks"])
        }
        out = P.paths(root)["reports"] / "sweep_m"
        summary = sweep_m(policy, phi, bank, task_sets, out)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    if args.command == "sweep-bank":
        from .evaluate import sweep_bank

        policy, bank, phi = _load_eval_inputs(args, "2")
        task_sets = {
            s: E.load_tasks(path)
            for s, path in zip(cfg.eval_seeds, P.paths(root)["eval_tasks"])
        }
        out = P.paths(root)["reports"] / "sweep_bank"
        summary = sweep_bank(policy, phi, bank, task_sets, out)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0
    if args.command == "gradcheck":
        from .gradcheck import run_op_gradcheck, stage1_loss_gradcheck

        worst = run_op_gradcheck(20)
        try:
            policy, bank, _ = _load_eval_inputs(args, "1")
            from .config import TrainConfig

            worst["stage1-loss"] = stage1_loss_gradcheck(policy, bank, TrainConfig())
        except ArtifactError:
            print("note: no trained artifacts; op-level checks only", file=sys.stderr)
        failed = {k: v for k, v in worst.items() if v >= 1e-4}
        for name, err in sorted(worst.items()):
            print(f"{'FAIL' if err >= 1e-4 else 'ok':4s}  {name:<24s} rel err {err:.2e}")
        return 0 if not failed else INVARIANT_EXIT
    if args.command == "bench":
        from .evaluate import bench

        policy, bank, phi = _load_eval_inputs(args, "2")
        tasks = E.load_tasks(P.paths(root)["eval_tasks"][0])
        print(json.dumps(bench(policy, phi, bank, tasks), indent=2, sort_keys=True))
        return 0
    if args.command == "run-all":
        marks = P.run_all(root, cfg)
        print(json.dumps(marks, indent=2, sort_keys=True))
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
