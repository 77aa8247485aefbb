"""Two-stage compressor optimization.

Stage 1 distills an extended-raw-window teacher into the latent-augmented
student: mean action cross-entropy plus a KL term from the detached teacher
distribution to the student's, both teacher-forced on the expert action.

Stage 2 samples rollout groups per instruction, scores them with the
leave-one-out baseline and applies the trajectory-level advantage to every
timestep, with a per-step KL penalty against contexts built by the frozen
Stage-1 compressor. Only the compressor parameters ever receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import memory as M
from .compressor import CompressorParams, compress, init_compressor, serialize_action
from .config import TrainConfig
from .env import TaskSpec, Trajectory
from .errors import ConfigError, ContractError, InvariantError
from .optim import AdamW
from .policy import Policy, action_ce, action_token_logits
from .runtime import RunSettings

# ---------------------------------------------------------------------------
# RLOO algebra
# ---------------------------------------------------------------------------


def rloo_advantages(rewards) -> np.ndarray:
    """Leave-one-out advantages; cross-checked against the rescaled form."""
    r = np.asarray(rewards, dtype=np.float64)
    g = r.size
    if g < 2:
        raise ConfigError(f"RLOO needs at least 2 rollouts, got {g}")
    loo = np.array([r[i] - (r.sum() - r[i]) / (g - 1) for i in range(g)])
    efficient = g / (g - 1) * (r - r.mean())
    if np.abs(loo - efficient).max() > 1e-12:
        raise InvariantError("RLOO leave-one-out and efficient forms disagree")
    return loo


# ---------------------------------------------------------------------------
# Stage 1: self-distillation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage1Sample:
    entry_id: int
    instruction: tuple
    events: tuple
    t: int  # decision step, t > L + 1

    @property
    def obs(self):
        return self.events[self.t - 1][0]

    @property
    def target_action(self):
        return self.events[self.t - 1][1]


def _decision_steps(events, instruction, window: int) -> list:
    """1-based goal-screen decision steps with a non-empty expired prefix."""
    from . import vocab as V

    out = []
    for t in range(window + 2, len(events) + 1):
        obs, action = events[t - 1]
        op = serialize_action(action)[0]
        if op == V.TYPE:
            out.append(t)
        elif op == V.CLICK and instruction[0] == V.FAM_GOTO and obs[0] == V.screen_token(6):
            out.append(t)
        elif op == V.CLICK and instruction[0] == V.FAM_PRESS and obs[0] == V.screen_token(7):
            out.append(t)
    return out


def build_stage1_samples(
    bank: M.Bank, count: int, window: int, seed: int, decision_frac: float = 0.5
) -> list:
    """(trajectory, timestep) draws with a non-empty expired prefix.

    Half the draws (by default) land on goal-screen decision steps so the
    compressor sees a steady share of the steps memory must inform.
    """
    demos = [e for e in bank.entries if e.outcome == "succ" and len(e.events) >= window + 2]
    if not demos:
        raise ConfigError("no demonstration trajectories long enough for stage 1")
    rng = np.random.default_rng(np.random.SeedSequence([1111, seed]))
    samples = []
    for _ in range(count):
        e = demos[int(rng.integers(0, len(demos)))]
        decisions = _decision_steps(e.events, e.instruction, window)
        if decisions and rng.random() < decision_frac:
            t = int(decisions[int(rng.integers(0, len(decisions)))])
        else:
            t = int(rng.integers(window + 2, len(e.events) + 1))
        samples.append(Stage1Sample(e.entry_id, e.instruction, e.events, t))
    return samples


def _teacher_distributions(
    policy: Policy, sample: Stage1Sample, l_prime: int, target_ids, cache: dict | None = None
) -> list:
    """Detached action-token distributions under the extended raw window.

    Depends only on the frozen policy and the sample, so results are cached
    across optimizer updates.
    """
    key = (sample.entry_id, sample.t)
    if cache is not None and key in cache:
        return cache[key]
    lo = max(0, sample.t - 1 - l_prime)
    window_events = sample.events[lo : sample.t - 1]
    with ad.no_grad():
        rows, n = policy.embed_context(sample.instruction, window_events, sample.obs)
        logits = action_token_logits(policy, rows, target_ids)
        dists = [ad.stop_gradient(ad.row_softmax(lg)) for lg in logits]
    if cache is not None:
        cache[key] = dists
    return dists


def _student_context(
    sample: Stage1Sample,
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    cfg: TrainConfig,
    proc_cache: dict | None = None,
    chunk_cache: dict | None = None,
    retrieval_cache: dict | None = None,
) -> M.WeavedContext:
    """Weaved context at the sampled step with both memory paths active.

    Retrieval queries use the sampled step's raw context; the sample's own
    bank entry is excluded to avoid leaking its latents to itself. Retrieval
    depends only on the frozen encoder, so indices are cached per sample.
    """
    t = sample.t
    lo = max(0, t - 1 - cfg.l_window)
    window_events = sample.events[lo : t - 1]
    rkey = (sample.entry_id, t)
    if retrieval_cache is not None and rkey in retrieval_cache:
        indices = retrieval_cache[rkey]
    else:
        q = policy.query_vector(sample.instruction, window_events, sample.obs)
        indices = M.retrieve(q, bank, cfg.m_retrieve, exclude_ids=(sample.entry_id,))
        if retrieval_cache is not None:
            retrieval_cache[rkey] = indices
    proc = M.assemble_procedural(indices, bank, phi, policy, cache=proc_cache)

    work = []
    expired = M.expired_prefix_len(t, cfg.l_window)
    for j, (clo, chi) in enumerate(M.chunk_bounds(expired, cfg.w_chunk)):
        key = (sample.entry_id, clo, chi)
        if chunk_cache is not None and key in chunk_cache:
            z = chunk_cache[key]
        else:
            z = compress(phi, policy, tuple(sample.events[clo:chi]), None)
            if chunk_cache is not None:
                chunk_cache[key] = z
        work.append((j, z))

    rows, n_t = policy.embed_context(sample.instruction, window_events, sample.obs)
    return M.weave(proc, work, rows, n_t, phi, cap=cfg.cap)


def stage1_sample_loss(
    sample: Stage1Sample,
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    cfg: TrainConfig,
    proc_cache: dict | None = None,
    chunk_cache: dict | None = None,
    student_ctx: M.WeavedContext | None = None,
    teacher_cache: dict | None = None,
    retrieval_cache: dict | None = None,
):
    """(loss, ce value, kl value) for one distillation sample."""
    if sample.t <= cfg.l_window + 1:
        raise ContractError(f"stage-1 sample needs t > L+1, got t={sample.t}")
    target_ids = serialize_action(sample.target_action)
    teacher = _teacher_distributions(policy, sample, cfg.l_prime, target_ids, cache=teacher_cache)
    if student_ctx is None:
        student_ctx = _student_context(
            sample, policy, phi, bank, cfg, proc_cache, chunk_cache, retrieval_cache
        )
    ce = action_ce(policy, student_ctx.rows, target_ids)
    student_logits = action_token_logits(policy, student_ctx.rows, target_ids)
    kl_terms = [
        ad.kl_divergence(tp, ad.row_softmax(lg)) for tp, lg in zip(teacher, student_logits)
    ]
    kl = ad.scale(_sum(kl_terms), 1.0 / len(kl_terms))
    loss = ad.add(ce, ad.scale(kl, cfg.lam))
    return loss, float(ce.data), float(kl.data)


def _sum(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return total


def heldout_distillation_kl(samples, policy, phi, bank, cfg, teacher_cache=None, retrieval_cache=None) -> float:
    """Mean teacher-to-student KL over a fixed held-out sample set."""
    vals = []
    for s in samples:
        target_ids = serialize_action(s.target_action)
        teacher = _teacher_distributions(policy, s, cfg.l_prime, target_ids, cache=teacher_cache)
        with ad.no_grad():
            ctx = _student_context(s, policy, phi, bank, cfg, retrieval_cache=retrieval_cache)
            logits = action_token_logits(policy, ctx.rows, target_ids)
            kls = [
                float(ad.kl_divergence(tp, ad.row_softmax(lg)).data)
                for tp, lg in zip(teacher, logits)
            ]
        vals.append(sum(kls) / len(kls))
    return float(np.mean(vals))


def assert_frozen_zero_grads(policy: Policy, phi_ref: CompressorParams | None = None) -> None:
    for name, t in policy.params.items():
        if t.grad is not None and np.any(t.grad):
            raise InvariantError(f"frozen policy parameter {name} received gradient")
    if phi_ref is not None:
        for name, t in phi_ref.params.items():
            if t.grad is not None and np.any(t.grad):
                raise InvariantError(f"reference compressor parameter {name} received gradient")


def train_stage1(
    policy: Policy,
    bank: M.Bank,
    cfg: TrainConfig,
    metrics_out=None,
    heldout_count: int = 48,
    phi: CompressorParams | None = None,
):
    """Optimize the compressor by self-distillation; returns (phi, metrics)."""
    if len(bank) == 0:
        raise ConfigError("stage 1 requires a non-empty bank")
    policy.assert_frozen_intact()
    phi = phi or init_compressor(cfg.seed, k=cfg.k)
    opt = AdamW(phi.tensors(), lr=cfg.lr, weight_decay=0.1, warmup_ratio=0.03, total_steps=cfg.updates)
    rng = np.random.default_rng(np.random.SeedSequence([2222, cfg.seed]))

    heldout = build_stage1_samples(bank, heldout_count, cfg.l_window, cfg.seed + 9000)
    pool = build_stage1_samples(bank, cfg.updates * cfg.batch, cfg.l_window, cfg.seed)
    metrics = []
    teacher_cache: dict = {}
    retrieval_cache: dict = {}
    initial_kl = heldout_distillation_kl(heldout, policy, phi, bank, cfg, teacher_cache, retrieval_cache)
    metrics.append({"step": 0, "heldout_kl": initial_kl})

    for step in range(cfg.updates):
        proc_cache: dict = {}
        chunk_cache: dict = {}
        batch = pool[step * cfg.batch : (step + 1) * cfg.batch]
        losses, ces, kls = [], [], []
        for s in batch:
            loss, ce, kl = stage1_sample_loss(
                s, policy, phi, bank, cfg, proc_cache, chunk_cache,
                teacher_cache=teacher_cache, retrieval_cache=retrieval_cache,
            )
            losses.append(loss)
            ces.append(ce)
            kls.append(kl)
        total = ad.scale(_sum(losses), 1.0 / len(losses))
        grads = ad.backward(total)
        assert_frozen_zero_grads(policy)
        opt.step(grads)
        ad.zero_grads(phi.tensors().values())
        rec = {
            "step": step + 1,
            "loss": round(float(total.data), 6),
            "ce": round(float(np.mean(ces)), 6),
            "kl": round(float(np.mean(kls)), 6),
        }
        if (step + 1) % 50 == 0 or step + 1 == cfg.updates:
            rec["heldout_kl"] = heldout_distillation_kl(
                heldout, policy, phi, bank, cfg, teacher_cache, retrieval_cache
            )
        metrics.append(rec)
        if metrics_out:
            metrics_out(rec)

    policy.assert_frozen_intact()
    final_kl = next(m["heldout_kl"] for m in reversed(metrics) if "heldout_kl" in m)
    summary = {"initial_heldout_kl": initial_kl, "final_heldout_kl": final_kl}
    return phi, {"records": metrics, "summary": summary}


# ---------------------------------------------------------------------------
# Stage 2: RLOO outcome-aware optimization
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    trajectory: Trajectory
    action_ids: list  # per-step 3-token tuples
    reward: int


@dataclass
class RolloutGroup:
    task: TaskSpec
    rollouts: list
    rewards: np.ndarray
    advantages: np.ndarray
    retrieved: list = field(default_factory=list)


def rollout_group(
    task: TaskSpec,
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    cfg: TrainConfig,
    seed: int,
) -> RolloutGroup:
    """Sample G episodes for one instruction at temperature 1."""
    if cfg.g_rollouts < 2:
        raise ConfigError("rollout groups need G >= 2")
    settings = RunSettings(
        mode="full", m=cfg.m_retrieve, cap=cfg.cap, window=cfg.l_window, chunk=cfg.w_chunk, greedy=False
    )
    from .runtime import run_episode

    rollouts = []
    retrieved: list = []
    for g in range(cfg.g_rollouts):
        rng = np.random.default_rng(np.random.SeedSequence([3333, cfg.seed, seed, g]))
        res = run_episode(policy, phi, bank, task, settings, rng=rng)
        rollouts.append(Rollout(res.trajectory, res.action_ids, res.trajectory.reward))
        retrieved = res.retrieved
    rewards = np.array([r.reward for r in rollouts], dtype=np.float64)
    advantages = rloo_advantages(rewards)
    return RolloutGroup(task, rollouts, rewards, advantages, retrieved)


def _replay_contexts(
    rollout: Rollout,
    task: TaskSpec,
    policy: Policy,
    phi: CompressorParams,
    bank: M.Bank,
    cfg: TrainConfig,
    retrieved=None,
    proc_cache: dict | None = None,
):
    """Rebuild the per-step weaved contexts of a recorded rollout under phi."""
    from .runtime import ContextBuilder

    settings = RunSettings(mode="full", m=cfg.m_retrieve, cap=cfg.cap, window=cfg.l_window, chunk=cfg.w_chunk)
    builder = ContextBuilder(
        policy, phi, bank, settings, proc_cache=proc_cache, preset_retrieved=retrieved
    )
    events = rollout.trajectory.events
    contexts = []
    for i in range(len(events)):
        contexts.append(builder.context(task.instruction, events[:i], events[i][0]))
    return contexts


def stage2_loss(
    group: RolloutGroup,
    policy: Policy,
    phi: CompressorParams,
    phi_ref: CompressorParams,
    bank: M.Bank,
    cfg: TrainConfig,
):
    """Policy-gradient plus KL-anchor loss for one rollout group.

    Each rollout contributes -A * mean_t log-prob(a_t) + beta * mean_t KL_t,
    where KL_t compares the current per-token action distributions against
    those under reference contexts built by the frozen Stage-1 compressor.
    Returns (loss tensor, mean KL value).
    """
    per_rollout = []
    kl_values = []
    cur_proc_cache: dict = {}
    ref_proc_cache: dict = {}
    for rollout, adv in zip(group.rollouts, group.advantages):
        if len(rollout.action_ids) != len(rollout.trajectory.events):
            raise ContractError("rollout actions and contexts are misaligned")
        contexts = _replay_contexts(
            rollout, group.task, policy, phi, bank, cfg, group.retrieved, cur_proc_cache
        )
        with ad.no_grad():
            ref_contexts = _replay_contexts(
                rollout, group.task, policy, phi_ref, bank, cfg, group.retrieved, ref_proc_cache
            )
        t_count = len(contexts)
        logp_terms = []
        kl_terms = []
        for ctx, ref_ctx, ids in zip(contexts, ref_contexts, rollout.action_ids):
            logits = action_token_logits(policy, ctx.rows, ids)
            ce_terms = [ad.cross_entropy(lg, tok) for lg, tok in zip(logits, ids)]
            logp_terms.append(ad.scale(_sum(ce_terms), -1.0))
            with ad.no_grad():
                ref_logits = action_token_logits(policy, ref_ctx.rows, ids)
            ref_dists = [ad.stop_gradient(ad.row_softmax(lg)) for lg in ref_logits]
            cur_dists = [ad.row_softmax(lg) for lg in logits]
            kls = [ad.kl_divergence(c, r) for c, r in zip(cur_dists, ref_dists)]
            kl_terms.append(ad.scale(_sum(kls), 1.0 / len(kls)))
        mean_logp = ad.scale(_sum(logp_terms), 1.0 / t_count)
        mean_kl = ad.scale(_sum(kl_terms), 1.0 / t_count)
        term = ad.add(ad.scale(mean_logp, -float(adv)), ad.scale(mean_kl, cfg.beta))
        per_rollout.append(term)
        kl_values.append(float(mean_kl.data))
    loss = ad.scale(_sum(per_rollout), 1.0 / len(per_rollout))
    return loss, float(np.mean(kl_values))


def train_stage2(
    policy: Policy,
    phi_stage1: CompressorParams,
    bank: M.Bank,
    tasks,
    cfg: TrainConfig,
    metrics_out=None,
):
    """RLOO updates from grouped rollouts; returns (phi, metrics)."""
    if not tasks:
        raise ConfigError("stage 2 requires a task list")
    policy.assert_frozen_intact()
    phi = CompressorParams(
        params={name: ad.tensor(t.data.copy(), trainable=True) for name, t in phi_stage1.params.items()},
        k=phi_stage1.k,
        h=phi_stage1.h,
        d=phi_stage1.d,
        n_heads=phi_stage1.n_heads,
        n_blocks=phi_stage1.n_blocks,
        outcome_token_in_encoder=phi_stage1.outcome_token_in_encoder,
        outcome_embed_in_queries=phi_stage1.outcome_embed_in_queries,
    )
    phi_ref = phi_stage1.clone()  # frozen stage-one reference
    phi_ref.set_trainable(False)
    opt = AdamW(phi.tensors(), lr=cfg.lr, weight_decay=0.1, warmup_ratio=0.03, total_steps=cfg.updates)
    metrics = []
    for step in range(cfg.updates):
        task = tasks[step % len(tasks)]
        group = rollout_group(task, policy, phi, bank, cfg, seed=step)
        loss, kl = _stage2_update(group, policy, phi, phi_ref, bank, cfg, opt)
        rec = {
            "step": step + 1,
            "mean_reward": float(group.rewards.mean()),
            "loss": round(loss, 6),
            "kl": round(kl, 6),
        }
        metrics.append(rec)
        if metrics_out:
            metrics_out(rec)
    policy.assert_frozen_intact()
    return phi, {"records": metrics}


def _stage2_update(group, policy, phi, phi_ref, bank, cfg, opt) -> tuple:
    loss, kl = stage2_loss(group, policy, phi, phi_ref, bank, cfg)
    grads = ad.backward(loss)
    assert_frozen_zero_grads(policy, phi_ref)
    opt.step(grads)
    ad.zero_grads(phi.tensors().values())
    ad.zero_grads(phi_ref.tensors().values())
    return float(loss.data), kl


def write_metrics(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
