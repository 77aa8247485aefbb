"""Acceptance suite: one test per criterion, at the stated tolerances.

Artifacts come from the standard pipeline. Set LATENTMEM_ACCEPT_ROOT to a
prebuilt artifact root to reuse it; otherwise the pipeline runs once into a
session temp directory (slow path). Each criterion prints one pass/fail line.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from latentmem import env as E
from latentmem import memory as M
from latentmem import pipeline as P
from latentmem.compressor import init_compressor
from latentmem.config import TrainConfig
from latentmem.evaluate import ablate, evaluate, load_records, sweep_bank, sweep_m
from latentmem.gradcheck import run_op_gradcheck, stage1_loss_gradcheck
from latentmem.runtime import RunSettings
from latentmem.training import rloo_advantages, train_stage1, train_stage2

CRITERIA_LOG: list = []


def _report(num: int, name: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    CRITERIA_LOG.append(line)
    print("\n" + line)


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    root = os.environ.get("LATENTMEM_ACCEPT_ROOT")
    if root and Path(root, "pipeline_times.json").exists():
        root = Path(root)
    else:
        root = tmp_path_factory.mktemp("artifacts")
        P.run_all(root)
    policy = P.load_policy(root)
    bank = P.load_bank(root)
    phi1 = P.load_compressor(P.paths(root)["phi_stage1"])
    phi2 = P.load_compressor(P.paths(root)["phi_stage2"])
    task_sets = {
        s: E.load_tasks(path)
        for s, path in zip(P.DEFAULTS.eval_seeds, P.paths(root)["eval_tasks"])
    }
    return {
        "root": Path(root),
        "policy": policy,
        "bank": bank,
        "phi1": phi1,
        "phi2": phi2,
        "task_sets": task_sets,
    }


@pytest.fixture(scope="session")
def ablation_rows(artifacts):
    t0 = time.perf_counter()
    result = ablate(
        artifacts["policy"], artifacts["phi2"], artifacts["bank"],
        artifacts["task_sets"], artifacts["root"] / "reports" / "ablation",
    )
    result["wall_seconds"] = time.perf_counter() - t0
    return result


def test_criterion_1_gradient_fidelity(artifacts):
    t0 = time.perf_counter()
    worst = run_op_gradcheck(20)
    worst["stage1-loss"] = stage1_loss_gradcheck(
        artifacts["policy"], artifacts["bank"], TrainConfig(), n_seeds=3
    )
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 120.0
    _report(1, "gradient fidelity", ok,
            f"worst rel err {max(worst.values()):.2e} over {len(worst)} checks in {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < 120.0


def test_criterion_2_frozen_backbone(artifacts):
    policy = artifacts["policy"]
    bank = artifacts["bank"]
    digest_before = policy.digest()
    cfg1 = TrainConfig(stage=1, lr=1e-3, updates=100, batch=2, seed=41)
    phi, _ = train_stage1(policy, bank, cfg1, heldout_count=4)
    tasks = E.load_tasks(P.paths(artifacts["root"])["stage2_tasks"])[:6]
    cfg2 = TrainConfig(stage=2, lr=3e-4, updates=50, g_rollouts=2, seed=41)
    train_stage2(policy, phi, bank, tasks, cfg2)
    digest_after = policy.digest()
    ok = digest_before == digest_after == policy.freeze_digest
    _report(2, "frozen backbone", ok,
            "theta digest unchanged after 100 stage-1 + 50 stage-2 updates; "
            "zero-grad buffers asserted every update")
    assert ok


def test_criterion_3_rloo_algebra():
    rng = np.random.default_rng(123)
    worst_gap = worst_sum = 0.0
    for _ in range(10_000):
        g = int(rng.integers(2, 9))
        rewards = rng.random(g)
        adv = rloo_advantages(rewards)
        eff = g / (g - 1) * (rewards - rewards.mean())
        worst_gap = max(worst_gap, float(np.abs(adv - eff).max()))
        worst_sum = max(worst_sum, abs(float(adv.sum())))
    ok = worst_gap < 1e-12 and worst_sum < 1e-12
    _report(3, "RLOO algebra", ok,
            f"10000 vectors: forms agree within {worst_gap:.1e}, sums within {worst_sum:.1e}")
    assert ok


def test_criterion_4_retrieval_exactness():
    rng = np.random.default_rng(321)
    checked = 0
    for trial in range(1000):
        n = int(rng.integers(1, 1001))
        m = int(rng.integers(1, 11))
        if rng.random() < 0.5:
            basis = rng.normal(size=(max(2, n // 10), 8))
            basis /= np.linalg.norm(basis, axis=1, keepdims=True)
            keys = basis[rng.integers(0, basis.shape[0], size=n)]  # forced ties
        else:
            keys = rng.normal(size=(n, 8))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        entries = [M.BankEntry(i, (0,), (), "succ", keys[i]) for i in range(n)]
        bank = M.Bank(entries=entries)
        q = rng.normal(size=8)
        q /= np.linalg.norm(q)
        got = M.retrieve(q, bank, m)
        sims = np.array([float(keys[i] @ q) for i in range(n)])
        oracle = list(np.lexsort((np.arange(n), -sims))[:m])
        assert got == oracle, trial
        checked += 1
    _report(4, "retrieval exactness", True, f"{checked} random banks matched the sort oracle")


def test_criterion_5_budget_invariant_and_cache(artifacts):
    tasks = artifacts["task_sets"][0]
    settings = RunSettings(mode="full", check_cache=True)
    rep = evaluate(artifacts["policy"], artifacts["phi2"], artifacts["bank"], tasks, settings)
    k = artifacts["phi2"].k
    violations = 0
    for rec in rep.records:
        for rows, (m_prime, j_t) in zip(rec["latent_rows"], rec["blocks"]):
            if rows != (m_prime + j_t) * k or m_prime + j_t > 12:
                violations += 1
    ok = violations == 0
    _report(5, "budget invariant + cache", ok,
            f"{sum(len(r['latent_rows']) for r in rep.records)} steps checked, "
            f"cache recomputation bit-identical, {violations} violations")
    assert ok


def test_criterion_6_ablation_structure(artifacts, ablation_rows):
    rows = {r["setting"]: r for r in ablation_rows["rows"]}
    vanilla = rows["vanilla"]["succ_pct"]
    full = rows["full"]["succ_pct"]
    no_work = rows["no-working"]["succ_pct"]
    no_exp = rows["no-experiential"]["succ_pct"]
    pipeline_times = json.loads((artifacts["root"] / "pipeline_times.json").read_text())
    total_minutes = (pipeline_times["train-stage2"] + ablation_rows["wall_seconds"]) / 60.0
    checks = {
        "full >= vanilla+10": full >= vanilla + 10.0,
        "no-working >= vanilla+3": no_work >= vanilla + 3.0,
        "no-experiential >= vanilla+3": no_exp >= vanilla + 3.0,
        "no-working <= full+2": no_work <= full + 2.0,
        "no-experiential <= full+2": no_exp <= full + 2.0,
        "full hit-max < vanilla hit-max": rows["full"]["hit_max_pct"] < rows["vanilla"]["hit_max_pct"],
        "end-to-end <= 30 min": total_minutes <= 30.0,
    }
    detail = (
        f"succ vanilla {vanilla:.1f} | full {full:.1f} | no-working {no_work:.1f} | "
        f"no-experiential {no_exp:.1f}; hit-max vanilla {rows['vanilla']['hit_max_pct']:.1f} "
        f"vs full {rows['full']['hit_max_pct']:.1f}; end-to-end {total_minutes:.1f} min"
    )
    ok = all(checks.values())
    _report(6, "ablation structure", ok, detail + "" if ok else detail + f"; failed: {[k for k, v in checks.items() if not v]}")
    assert ok, {k: v for k, v in checks.items() if not v}


def test_criterion_7_bank_scaling(artifacts):
    summary = sweep_bank(
        artifacts["policy"], artifacts["phi2"], artifacts["bank"],
        artifacts["task_sets"], artifacts["root"] / "reports" / "sweep_bank",
        sizes=(100, 400, 1600),
    )
    succ = [row["succ_pct"] for row in summary]
    ok = all(b >= a - 2.0 for a, b in zip(succ, succ[1:]))
    _report(7, "bank scaling", ok, f"success at 100/400/1600 = {[round(s,1) for s in succ]}")
    assert ok, succ


def test_criterion_8_retrieval_budget(artifacts):
    summary = sweep_m(
        artifacts["policy"], artifacts["phi2"], artifacts["bank"],
        artifacts["task_sets"], artifacts["root"] / "reports" / "sweep_m",
        m_values=(1, 5),
    )
    by_m = {row["m"]: row["succ_pct"] for row in summary}
    ok = by_m[5] >= by_m[1] - 2.0
    _report(8, "retrieval budget", ok, f"success M=1 {by_m[1]:.1f} vs M=5 {by_m[5]:.1f}")
    assert ok, by_m


def test_criterion_9_training_signals(artifacts):
    summary = json.loads((artifacts["root"] / "stage1_summary.json").read_text())
    ratio = summary["final_heldout_kl"] / max(summary["initial_heldout_kl"], 1e-12)
    records = [json.loads(line) for line in open(artifacts["root"] / "stage2_metrics.jsonl")]
    rewards = [r["mean_reward"] for r in records]
    window = 20
    mas = [float(np.mean(rewards[i : i + window])) for i in range(len(rewards) - window + 1)]
    reward_ok = mas[-1] >= mas[0]
    kl_ok = ratio <= 0.5
    _report(9, "training signals", kl_ok and reward_ok,
            f"stage-1 held-out KL ratio {ratio:.2f} (gate 0.50); "
            f"stage-2 reward MA first {mas[0]:.3f} -> last {mas[-1]:.3f}")
    assert kl_ok, ratio
    assert reward_ok, (mas[0], mas[-1])


def test_criterion_10_determinism(artifacts, tmp_path):
    tasks = artifacts["task_sets"][1]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    settings = RunSettings(mode="full")
    evaluate(artifacts["policy"], artifacts["phi2"], artifacts["bank"], tasks, settings, record_path=a)
    evaluate(artifacts["policy"], artifacts["phi2"], artifacts["bank"], tasks, settings, record_path=b)
    ok = a.read_bytes() == b.read_bytes()
    _report(10, "determinism", ok, f"rerun records byte-identical ({a.stat().st_size} bytes)")
    assert ok


def test_zzz_print_summary():
    print("\n" + "=" * 72)
    for line in CRITERIA_LOG:
        print(line)
    print("=" * 72)
