"""Evaluation metrics, ablation and scaling studies, and report files.

Deterministic per-task records go to a line-delimited JSON file; wall-clock
times go to a separate .timing sidecar so records are byte-identical across
reruns of the same configuration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import memory as M
from .compressor import CompressorParams
from .env import TaskSpec
from .errors import ConfigError, InvariantError
from .policy import Policy
from .runtime import MODES, RunSettings, run_episode


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)


def aggregate_records(records, timing=None) -> dict:
    """Recompute the headline metrics from raw per-task records."""
    n = len(records)
    if n == 0:
        return {"succ_pct": 0.0, "mean_steps": 0.0, "hit_max_pct": 0.0}
    out = {
        "succ_pct": 100.0 * sum(r["success"] for r in records) / n,
        "mean_steps": sum(r["steps"] for r in records) / n,
        "hit_max_pct": 100.0 * sum(r["hit_max"] for r in records) / n,
    }
    if timing:
        total = sum(t["wall_seconds"] for t in timing)
        steps = sum(r["steps"] for r in records)
        out["time_per_task"] = total / n
        out["time_per_step"] = total / max(1, steps)
    return out


def evaluate(
    policy: Policy,
    phi: CompressorParams | None,
    bank: M.Bank | None,
    tasks,
    settings: RunSettings,
    record_path=None,
) -> EvalReport:
    """Greedy evaluation over a task list under one memory mode.

    Per-step budget invariants are asserted inside run_episode; any violation
    aborts the run. Records are emitted in task-id order.
    """
    if settings.mode not in MODES:
        raise ConfigError(f"unknown mode {settings.mode!r}")
    proc_cache: dict = {}
    report = EvalReport()
    for task_id, task in enumerate(tasks):
        res = run_episode(policy, phi, bank, task, settings, proc_cache=proc_cache)
        report.records.append(
            {
                "task_id": task_id,
                "family": task.family,
                "app": task.app_index,
                "depth": task.depth,
                "success": bool(res.success),
                "steps": res.steps,
                "hit_max": bool(res.hit_max),
                "latent_rows": res.latent_rows,
                "blocks": res.block_counts,
            }
        )
        report.timing.append({"task_id": task_id, "wall_seconds": res.wall_seconds})
    report.aggregates = aggregate_records(report.records, report.timing)
    if record_path is not None:
        write_report(record_path, report)
    return report


def write_report(path, report: EvalReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(path.with_suffix(path.suffix + ".timing"), "w") as fh:
        for rec in report.timing:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    agg = dict(report.aggregates)
    table = path.with_suffix(".table.txt")
    lines = ["metric                value", "-" * 30]
    for key in ("succ_pct", "mean_steps", "hit_max_pct", "time_per_task", "time_per_step"):
        if key in agg:
            lines.append(f"{key:<20s} {agg[key]:10.3f}")
    table.write_text("\n".join(lines) + "\n")


def load_records(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def ablate(
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    task_sets: dict,
    out_dir,
    settings: RunSettings | None = None,
) -> dict:
    """4 modes x len(task_sets) seeds; one report each plus a comparison table.

    Returns {mode: {seed: aggregates}} plus seed-averaged rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = settings or RunSettings()
    results: dict = {}
    for mode in MODES:
        results[mode] = {}
        for seed, tasks in task_sets.items():
            s = RunSettings(
                mode=mode, m=base.m, cap=base.cap, window=base.window, chunk=base.chunk
            )
            use_phi = None if mode == "vanilla" else phi
            use_bank = None if mode == "vanilla" else bank
            rep = evaluate(
                policy, use_phi, use_bank, tasks, s,
                record_path=out_dir / f"{mode}-seed{seed}.jsonl",
            )
            results[mode][seed] = rep.aggregates
    rows = []
    for mode in MODES:
        aggs = list(results[mode].values())
        rows.append(
            {
                "setting": mode,
                "succ_pct": float(np.mean([a["succ_pct"] for a in aggs])),
                "mean_steps": float(np.mean([a["mean_steps"] for a in aggs])),
                "hit_max_pct": float(np.mean([a["hit_max_pct"] for a in aggs])),
                "time_per_task": float(np.mean([a.get("time_per_task", 0.0) for a in aggs])),
                "time_per_step": float(np.mean([a.get("time_per_step", 0.0) for a in aggs])),
            }
        )
    table = ["setting          Succ.   #Steps  Hit-Max  Time/Task  Time/Step", "-" * 66]
    for r in rows:
        table.append(
            f"{r['setting']:<15s} {r['succ_pct']:6.1f} {r['mean_steps']:8.2f} "
            f"{r['hit_max_pct']:8.1f} {r['time_per_task']:10.3f} {r['time_per_step']:10.3f}"
        )
    (out_dir / "comparison.txt").write_text("\n".join(table) + "\n")
    (out_dir / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    return {"per_mode": results, "rows": rows}


def sweep_m(
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    task_sets: dict,
    out_dir,
    m_values=(1, 3, 5, 7, 9),
) -> list:
    """Retrieval-budget sweep in full mode; seed-averaged success per M."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for m in m_values:
        aggs = []
        for seed, tasks in task_sets.items():
            rep = evaluate(
                policy, phi, bank, tasks, RunSettings(mode="full", m=m),
                record_path=out_dir / f"m{m}-seed{seed}.jsonl",
            )
            aggs.append(rep.aggregates)
        summary.append(
            {
                "m": m,
                "succ_pct": float(np.mean([a["succ_pct"] for a in aggs])),
                "hit_max_pct": float(np.mean([a["hit_max_pct"] for a in aggs])),
            }
        )
    _write_sweep_table(out_dir / "summary", "m", summary)
    return summary


def sweep_bank(
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    task_sets: dict,
    out_dir,
    sizes=(100, 400, 1600),
) -> list:
    """Bank-size sweep in full mode on nested bank prefixes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for size in sizes:
        sub = bank.subset(size)
        aggs = []
        for seed, tasks in task_sets.items():
            rep = evaluate(
                policy, phi, sub, tasks, RunSettings(mode="full"),
                record_path=out_dir / f"bank{size}-seed{seed}.jsonl",
            )
            aggs.append(rep.aggregates)
        summary.append(
            {
                "bank_size": size,
                "succ_pct": float(np.mean([a["succ_pct"] for a in aggs])),
                "hit_max_pct": float(np.mean([a["hit_max_pct"] for a in aggs])),
            }
        )
    _write_sweep_table(out_dir / "summary", "bank_size", summary)
    return summary


def _write_sweep_table(path_base: Path, key: str, summary: list) -> None:
    lines = [f"{key:>10s}  succ_pct  hit_max_pct", "-" * 36]
    for row in summary:
        lines.append(f"{row[key]:>10}  {row['succ_pct']:8.1f}  {row['hit_max_pct']:11.1f}")
    Path(str(path_base) + ".txt").write_text("\n".join(lines) + "\n")
    Path(str(path_base) + ".json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def bench(policy: Policy, phi: CompressorParams, bank: M.Bank, tasks) -> dict:
    """Wall-time microbenchmarks for the hot paths."""
    from .compressor import compress

    task = tasks[0]
    from .env import MiniGuiEnv, expert_rollout

    traj = expert_rollout(task)
    t0 = time.perf_counter()
    reps = 20
    for _ in range(reps):
        compress(phi, policy, traj.events[:4], None)
    compress_ms = 1000 * (time.perf_counter() - t0) / reps

    t0 = time.perf_counter()
    for t in tasks[:10]:
        run_episode(policy, phi, bank, t, RunSettings(mode="full"), proc_cache={})
    episode_ms = 1000 * (time.perf_counter() - t0) / 10

    t0 = time.perf_counter()
    for t in tasks[:10]:
        run_episode(policy, None, None, t, RunSettings(mode="vanilla"))
    vanilla_ms = 1000 * (time.perf_counter() - t0) / 10
    return {
        "compress_ms": round(compress_ms, 2),
        "full_episode_ms": round(episode_ms, 2),
        "vanilla_episode_ms": round(vanilla_ms, 2),
    }
