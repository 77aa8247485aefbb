"""End-to-end orchestration: task sets, pretraining, bank, both training
stages and evaluation suites, with on-disk artifacts under one root."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env as E
from . import memory as M
from .checkpoint import load_arrays, save_arrays, save_json
from .compressor import CompressorParams, init_compressor
from .config import TrainConfig, artifact_root
from .errors import ArtifactError
from .policy import Policy, pretrain_bc
from .runtime import RunSettings, run_episode
from .training import train_stage1, train_stage2, write_metrics

EVAL_MIX = {"form-fill": 0.5, "procedure": 0.3, "trap": 0.2}
TRAIN_MIX = {"form-fill": 0.4, "procedure": 0.35, "trap": 0.25}
BANK_DEPTHS = {"form-fill": (5, 6), "procedure": (4, 5, 6), "trap": (4, 5, 6)}

# Disjoint per-purpose task-seed bases keep task instances from colliding.
BANK_LOCAL_BASE = 1_000
STAGE2_LOCAL_BASE = 20_000
EVAL_LOCAL_BASE = 30_000


@dataclass
class PipelineDefaults:
    bc_tasks: int = 800
    bc_updates: int = 3200
    bank_tasks: int = 400
    bank_rollouts_per_task: int = 3
    bank_min_len: int = 4
    stage1_updates: int = 1300
    stage1_lr: float = 2.5e-3
    stage1_lam: float = 0.25
    stage2_updates: int = 50
    stage2_lr: float = 3e-4
    stage2_tasks: int = 40
    eval_tasks: int = 200
    eval_seeds: tuple = (0, 1, 2)
    seed: int = 0


DEFAULTS = PipelineDefaults()


def paths(root=None) -> dict:
    root = Path(root) if root is not None else artifact_root()
    return {
        "root": root,
        "train_tasks": root / "train_tasks.tsv",
        "stage2_tasks": root / "stage2_tasks.tsv",
        "eval_tasks": [root / f"eval_tasks_seed{s}.tsv" for s in DEFAULTS.eval_seeds],
        "bank_tasks": root / "bank_tasks.tsv",
        "policy": root / "policy.ckpt",
        "policy_sidecar": root / "policy.json",
        "bank": root / "bank.bin",
        "phi_stage1": root / "compressor_stage1.ckpt",
        "phi_stage2": root / "compressor_stage2.ckpt",
        "stage1_metrics": root / "stage1_metrics.jsonl",
        "stage2_metrics": root / "stage2_metrics.jsonl",
        "reports": root / "reports",
    }


def eval_task_sets(cfg: PipelineDefaults = DEFAULTS) -> dict:
    return {
        s: E.generate_tasks(
            EVAL_MIX,
            cfg.eval_tasks,
            seed=100 + s,
            apps=E.EVAL_APPS,
            depths=E.EVAL_DEPTHS,
            local_base=EVAL_LOCAL_BASE + 1000 * s,
        )
        for s in cfg.eval_seeds
    }


def gen_tasks(root=None, cfg: PipelineDefaults = DEFAULTS) -> dict:
    p = paths(root)
    p["root"].mkdir(parents=True, exist_ok=True)
    train = E.generate_tasks(TRAIN_MIX, cfg.bc_tasks, seed=cfg.seed, echo_weights=(0.3, 0.35, 0.35))
    E.save_tasks(p["train_tasks"], train)
    bank_tasks = E.generate_tasks(
        EVAL_MIX, cfg.bank_tasks, seed=100, apps=E.EVAL_APPS, depths=BANK_DEPTHS,
        local_base=BANK_LOCAL_BASE,
    )
    E.save_tasks(p["bank_tasks"], bank_tasks)
    s2 = E.generate_tasks(
        EVAL_MIX, cfg.stage2_tasks, seed=7, apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS,
        local_base=STAGE2_LOCAL_BASE,
    )
    E.save_tasks(p["stage2_tasks"], s2)
    for s, path in zip(cfg.eval_seeds, p["eval_tasks"]):
        E.save_tasks(path, eval_task_sets(cfg)[s])
    return p


def pretrain(root=None, cfg: PipelineDefaults = DEFAULTS) -> tuple:
    p = paths(root)
    train = E.load_tasks(p["train_tasks"])
    policy, report = pretrain_bc(train, updates=cfg.bc_updates, seed=cfg.seed)
    policy.save(p["policy"], p["policy_sidecar"])
    save_json(p["root"] / "pretrain_report.json", report)
    return policy, report


def load_policy(root=None) -> Policy:
    p = paths(root)
    return Policy.load(p["policy"], p["policy_sidecar"])


def build_bank(root=None, cfg: PipelineDefaults = DEFAULTS, policy: Policy | None = None) -> M.Bank:
    """Expert trajectory per bank task plus sampled vanilla rollouts, shuffled
    (so bank prefixes are representative) and pruned of degenerate entries."""
    p = paths(root)
    policy = policy or load_policy(root)
    tasks = E.load_tasks(p["bank_tasks"])
    trajectories = [E.expert_rollout(t) for t in tasks]
    settings = RunSettings(mode="vanilla", greedy=False)
    rng = np.random.default_rng(np.random.SeedSequence([4444, cfg.seed]))
    for task in tasks:
        for _ in range(cfg.bank_rollouts_per_task):
            trajectories.append(run_episode(policy, None, None, task, settings, rng=rng).trajectory)
    trajectories = [t for t in trajectories if len(t.events) >= cfg.bank_min_len]
    order = np.random.default_rng(np.random.SeedSequence([5555, cfg.seed])).permutation(len(trajectories))
    bank = M.build_bank([trajectories[i] for i in order], policy)
    M.save_bank(p["bank"], bank, h=policy.config.h)
    return bank


def load_bank(root=None) -> M.Bank:
    return M.load_bank(paths(root)["bank"])


def stage1(root=None, cfg: PipelineDefaults = DEFAULTS, policy=None, bank=None) -> CompressorParams:
    p = paths(root)
    policy = policy or load_policy(root)
    bank = bank or load_bank(root)
    tc = TrainConfig(
        stage=1, lr=cfg.stage1_lr, lam=cfg.stage1_lam, updates=cfg.stage1_updates,
        batch=8, seed=cfg.seed,
    )
    phi, metrics = train_stage1(policy, bank, tc)
    save_arrays(p["phi_stage1"], phi.arrays())
    write_metrics(p["stage1_metrics"], metrics["records"])
    save_json(p["root"] / "stage1_summary.json", metrics["summary"])
    return phi


def stage2(root=None, cfg: PipelineDefaults = DEFAULTS, policy=None, bank=None, phi1=None) -> CompressorParams:
    p = paths(root)
    policy = policy or load_policy(root)
    bank = bank or load_bank(root)
    phi1 = phi1 or load_compressor(p["phi_stage1"])
    tasks = E.load_tasks(p["stage2_tasks"])
    tc = TrainConfig(
        stage=2, lr=cfg.stage2_lr, updates=cfg.stage2_updates, g_rollouts=4, seed=cfg.seed
    )
    phi, metrics = train_stage2(policy, phi1, bank, tasks, tc)
    save_arrays(p["phi_stage2"], phi.arrays())
    write_metrics(p["stage2_metrics"], metrics["records"])
    return phi


def load_compressor(path) -> CompressorParams:
    arrays = load_arrays(path)
    phi = init_compressor(0)
    for name, t in phi.tensors().items():
        if name not in arrays:
            raise ArtifactError(f"compressor checkpoint missing {name}")
        t.data = arrays[name]
    return phi


def run_all(root=None, cfg: PipelineDefaults = DEFAULTS, log=print) -> dict:
    """gen-tasks -> pretrain -> bank -> stage1 -> stage2, timed."""
    t0 = time.perf_counter()
    marks = {}

    def mark(name):
        marks[name] = round(time.perf_counter() - t0, 1)
        if log:
            log(f"[{marks[name]:7.1f}s] {name} done")

    gen_tasks(root, cfg)
    mark("gen-tasks")
    policy, report = pretrain(root, cfg)
    mark("pretrain-policy")
    bank = build_bank(root, cfg, policy)
    mark("build-bank")
    phi1 = stage1(root, cfg, policy, bank)
    mark("train-stage1")
    stage2(root, cfg, policy, bank, phi1)
    mark("train-stage2")
    save_json(paths(root)["root"] / "pipeline_times.json", marks)
    return marks
