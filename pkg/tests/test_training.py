"""Two-stage training: RLOO algebra, loss identities, gradient partition."""

import numpy as np
import pytest

from latentmem import autodiff as ad
from latentmem import env as E
from latentmem import memory as M
from latentmem.compressor import init_compressor, serialize_action
from latentmem.config import TrainConfig
from latentmem.errors import ConfigError, ContractError
from latentmem.policy import Policy, action_token_logits
from latentmem.training import (
    Stage1Sample,
    _student_context,
    _teacher_distributions,
    build_stage1_samples,
    rloo_advantages,
    rollout_group,
    stage1_sample_loss,
    stage2_loss,
)


@pytest.fixture(scope="module")
def policy():
    p = Policy(seed=4)
    p.freeze()
    return p


@pytest.fixture(scope="module")
def bank(policy):
    tasks = E.generate_tasks(
        {"form-fill": 0.5, "procedure": 0.3, "trap": 0.2}, 8, 11,
        apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=80000,
    )
    return M.build_bank([E.expert_rollout(t) for t in tasks], policy)


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig(stage=1, lam=1.0)


def test_rloo_example_vector():
    assert np.allclose(rloo_advantages([1, 0, 0, 1]), [2 / 3, -2 / 3, -2 / 3, 2 / 3])


def test_rloo_all_equal_rewards_zero():
    assert np.allclose(rloo_advantages([1, 1, 1, 1]), np.zeros(4))
    assert np.allclose(rloo_advantages([0, 0]), np.zeros(2))


def test_rloo_three_rollouts():
    assert np.allclose(rloo_advantages([1, 1, 0]), [0.5, 0.5, -1.0])


def test_rloo_needs_two():
    with pytest.raises(ConfigError):
        rloo_advantages([1.0])


def test_rloo_forms_agree_and_sum_zero():
    rng = np.random.default_rng(0)
    for _ in range(500):
        g = int(rng.integers(2, 9))
        r = rng.random(g)
        adv = rloo_advantages(r)
        eff = g / (g - 1) * (r - r.mean())
        assert np.abs(adv - eff).max() < 1e-12
        assert abs(adv.sum()) < 1e-12


def test_stage1_sample_requires_expired_prefix(policy, bank, cfg):
    entry = next(e for e in bank.entries if len(e.events) >= 6)
    bad = Stage1Sample(entry.entry_id, entry.instruction, entry.events, t=3)
    with pytest.raises(ContractError):
        stage1_sample_loss(bad, policy, init_compressor(0), bank, cfg)


def test_stage1_samples_draw_valid_timesteps(bank):
    samples = build_stage1_samples(bank, 50, 3, seed=0)
    assert all(s.t > 4 for s in samples)
    assert all(s.t <= len(s.events) for s in samples)


def test_stage1_lambda_zero_is_plain_action_ce(policy, bank):
    cfg0 = TrainConfig(stage=1, lam=0.0)
    sample = build_stage1_samples(bank, 1, 3, seed=1)[0]
    phi = init_compressor(1)
    loss, ce, kl = stage1_sample_loss(sample, policy, phi, bank, cfg0)
    assert abs(float(loss.data) - ce) < 1e-12
    assert kl >= 0.0


def test_stage1_teacher_context_diagnostic_kl_zero(policy, bank, cfg):
    """Student given the teacher's own context makes the KL term vanish."""
    sample = build_stage1_samples(bank, 1, 3, seed=2)[0]
    target = serialize_action(sample.target_action)
    teacher = _teacher_distributions(policy, sample, cfg.l_prime, target)
    lo = max(0, sample.t - 1 - cfg.l_prime)
    with ad.no_grad():
        rows, _ = policy.embed_context(
            sample.instruction, sample.events[lo : sample.t - 1], sample.obs
        )
        logits = action_token_logits(policy, rows, target)
        kls = [float(ad.kl_divergence(tp, ad.row_softmax(lg)).data) for tp, lg in zip(teacher, logits)]
    assert max(kls) < 1e-12


def test_stage1_gradients_phi_only_and_match_fd(policy, bank, cfg):
    phi = init_compressor(2)
    sample = build_stage1_samples(bank, 1, 3, seed=3)[0]

    def loss_fn():
        loss, _, _ = stage1_sample_loss(sample, policy, phi, bank, cfg)
        return loss

    wrt = [phi.params["queries"], phi.params["proj"], phi.params["b_work"], phi.params["blk1.wq"]]
    ad.zero_grads(list(phi.tensors().values()))
    grads = ad.backward(loss_fn())
    for name, t in policy.params.items():
        assert t.grad is None or not np.any(t.grad), name
    assert any(np.any(g) for g in grads.values())
    err = ad.check_gradients(lambda: loss_fn().item(), wrt, rng=np.random.default_rng(4), max_entries=3)
    assert err < 1e-4, err


def test_rollout_group_reproducible(policy, bank):
    cfg = TrainConfig(stage=2, g_rollouts=2, seed=5)
    task = E.generate_tasks({"trap": 1.0}, 1, 12, apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=81000)[0]
    a = rollout_group(task, policy, init_compressor(3), bank, cfg, seed=0)
    b = rollout_group(task, policy, init_compressor(3), bank, cfg, seed=0)
    assert a.rewards.tolist() == b.rewards.tolist()
    assert [r.action_ids for r in a.rollouts] == [r.action_ids for r in b.rollouts]
    assert abs(a.advantages.sum()) < 1e-12
    for r in a.rollouts:
        assert len(r.trajectory.events) <= task.t_max


def test_stage2_identity_and_uniform_reward_cases(policy, bank):
    cfg = TrainConfig(stage=2, g_rollouts=2, beta=0.05, seed=6)
    task = E.generate_tasks({"procedure": 1.0}, 1, 13, apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=82000)[0]
    phi = init_compressor(4)
    group = rollout_group(task, policy, phi, bank, cfg, seed=1)
    group.advantages = np.zeros_like(group.advantages)  # uniform-reward case
    phi_ref = phi.clone()
    phi_ref.set_trainable(False)
    loss, kl = stage2_loss(group, policy, phi, phi_ref, bank, cfg)
    # phi == phi_ref: KL exactly zero; zero advantages: loss is pure KL penalty.
    assert kl == 0.0
    assert abs(float(loss.data)) < 1e-12


def test_stage2_zero_grads_for_theta_and_reference(policy, bank):
    cfg = TrainConfig(stage=2, g_rollouts=2, beta=0.05, seed=7)
    task = E.generate_tasks({"form-fill": 1.0}, 1, 14, apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=83000)[0]
    phi = init_compressor(5)
    phi_ref = init_compressor(6)  # distinct reference: nonzero KL path
    phi_ref.set_trainable(False)
    group = rollout_group(task, policy, phi, bank, cfg, seed=2)
    loss, _ = stage2_loss(group, policy, phi, phi_ref, bank, cfg)
    grads = ad.backward(loss)
    for name, t in policy.params.items():
        assert t.grad is None or not np.any(t.grad), name
    for name, t in phi_ref.params.items():
        assert t.grad is None or not np.any(t.grad), name
    assert any(t in grads for t in phi.tensors().values())


def test_stage2_advantage_broadcast(policy, bank):
    """Every timestep of a rollout shares the trajectory's advantage."""
    cfg = TrainConfig(stage=2, g_rollouts=2, beta=0.0, seed=8)
    task = E.generate_tasks({"trap": 1.0}, 1, 15, apps=E.EVAL_APPS, depths=E.EVAL_DEPTHS, local_base=84000)[0]
    phi = init_compressor(7)
    phi_ref = phi.clone()
    phi_ref.set_trainable(False)
    group = rollout_group(task, policy, phi, bank, cfg, seed=3)
    group.advantages = np.array([1.0, -1.0])
    loss, _ = stage2_loss(group, policy, phi, phi_ref, bank, cfg)
    # Manual recomputation with the same per-step advantage value.
    expected = 0.0
    for rollout, adv in zip(group.rollouts, group.advantages):
        from latentmem.training import _replay_contexts

        with ad.no_grad():
            contexts = _replay_contexts(rollout, task, policy, phi, bank, cfg, group.retrieved)
            per_step = []
            for ctx, ids in zip(contexts, rollout.action_ids):
                logits = action_token_logits(policy, ctx.rows, ids)
                logp = sum(float(np.log(ad.row_softmax(lg).data[tok])) for lg, tok in zip(logits, ids))
                per_step.append(logp)
        expected += -adv * np.mean(per_step)
    expected /= len(group.rollouts)
    assert abs(float(loss.data) - expected) < 1e-9


def test_stage1_student_context_excludes_self(policy, bank, cfg):
    sample = build_stage1_samples(bank, 1, 3, seed=9)[0]
    retrieval_cache: dict = {}
    with ad.no_grad():
        _student_context(sample, policy, init_compressor(8), bank, cfg, retrieval_cache=retrieval_cache)
    (indices,) = retrieval_cache.values()
    assert sample.entry_id not in indices
