"""Harness: config files, eval reports, determinism, ablation semantics."""

import json

import numpy as np
import pytest

from latentmem import env as E
from latentmem import memory as M
from latentmem.cli import main as cli_main
from latentmem.compressor import init_compressor
from latentmem.config import make_train_config, parse_config_file
from latentmem.errors import ConfigError
from latentmem.evaluate import aggregate_records, evaluate, load_records, write_report
from latentmem.policy import Policy
from latentmem.runtime import RunSettings


@pytest.fixture(scope="module")
def setup():
    policy = Policy(seed=6)
    policy.freeze()
    bank_tasks = E.generate_tasks(
        {"form-fill": 0.5, "procedure": 0.3, "trap": 0.2}, 8, 21,
        apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=90000,
    )
    bank = M.build_bank([E.expert_rollout(t) for t in bank_tasks], policy)
    tasks = E.generate_tasks(
        {"form-fill": 0.5, "procedure": 0.3, "trap": 0.2}, 10, 22,
        apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=91000,
    )
    return policy, bank, init_compressor(9), tasks


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        """
        # training configuration
        stage = 1
        lr = 2.5e-3
        lam = 0.25
        m_retrieve = 5
        cap = 12
        """
    )
    cfg = make_train_config(parse_config_file(path))
    assert cfg.stage == 1 and cfg.lr == 2.5e-3 and cfg.lam == 0.25
    assert cfg.m_retrieve == 5 and cfg.cap == 12


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("warp_drive = 9\n")
    with pytest.raises(ConfigError):
        make_train_config(parse_config_file(path))


def test_vanilla_mode_never_builds_latents(setup):
    policy, bank, phi, tasks = setup
    rep = evaluate(policy, None, None, tasks[:4], RunSettings(mode="vanilla"))
    for rec in rep.records:
        assert all(r == 0 for r in rec["latent_rows"])


def test_full_mode_uses_m_procedural_blocks_at_step_one(setup):
    policy, bank, phi, tasks = setup
    rep = evaluate(policy, phi, bank, tasks[:4], RunSettings(mode="full", m=5))
    for rec in rep.records:
        m_prime, j_t = rec["blocks"][0]
        assert m_prime == min(5, len(bank))
        assert j_t == 0  # no expired prefix at step 1


def test_ablation_modes_zero_one_block(setup):
    policy, bank, phi, tasks = setup
    rep_nw = evaluate(policy, phi, bank, tasks[:4], RunSettings(mode="no-working"))
    for rec in rep_nw.records:
        assert all(j == 0 for _, j in rec["blocks"])
        assert any(m > 0 for m, _ in rec["blocks"])
    rep_ne = evaluate(policy, phi, bank, tasks[:4], RunSettings(mode="no-experiential"))
    for rec in rep_ne.records:
        assert all(m == 0 for m, _ in rec["blocks"])


def test_eval_records_byte_identical_across_runs(setup, tmp_path):
    policy, bank, phi, tasks = setup
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    evaluate(policy, phi, bank, tasks[:5], RunSettings(mode="full"), record_path=a)
    evaluate(policy, phi, bank, tasks[:5], RunSettings(mode="full"), record_path=b)
    assert a.read_bytes() == b.read_bytes()


def test_aggregates_recomputable_from_records(setup, tmp_path):
    policy, bank, phi, tasks = setup
    path = tmp_path / "r.jsonl"
    rep = evaluate(policy, phi, bank, tasks[:6], RunSettings(mode="full"), record_path=path)
    again = aggregate_records(load_records(path))
    for key in ("succ_pct", "mean_steps", "hit_max_pct"):
        assert abs(rep.aggregates[key] - again[key]) < 1e-9


def test_working_cache_check_mode_passes(setup):
    policy, bank, phi, tasks = setup
    rep = evaluate(policy, phi, bank, tasks[:3], RunSettings(mode="full", check_cache=True))
    assert len(rep.records) == 3


def test_report_files_written(setup, tmp_path):
    policy, bank, phi, tasks = setup
    path = tmp_path / "out" / "r.jsonl"
    evaluate(policy, phi, bank, tasks[:3], RunSettings(mode="full"), record_path=path)
    assert path.exists()
    assert path.with_suffix(path.suffix + ".timing").exists()
    assert path.with_suffix(".table.txt").exists()


def test_cli_unknown_command_usage_exit():
    with pytest.raises(SystemExit):
        cli_main(["no-such-command"])


def test_cli_artifact_error_exit(tmp_path):
    code = cli_main(["--root", str(tmp_path / "empty"), "eval", "--mode", "full"])
    assert code == 2


def test_cli_gen_tasks_writes_files(tmp_path):
    code = cli_main(["--root", str(tmp_path), "gen-tasks"])
    assert code == 0
    assert (tmp_path / "train_tasks.tsv").exists()
    assert (tmp_path / "eval_tasks_seed2.tsv").exists()
    tasks = E.load_tasks(tmp_path / "eval_tasks_seed0.tsv")
    assert len(tasks) == 200
    fams = {t.family for t in tasks}
    assert fams == {"form-fill", "procedure", "trap"}
    assert all(t.depth >= 5 for t in tasks)
    assert all(t.echo == 0 for t in tasks)
