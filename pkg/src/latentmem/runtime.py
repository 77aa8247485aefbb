"""Shared episode machinery: per-step context assembly and episode rollout.

One ContextBuilder serves evaluation, Stage-2 rollouts and their loss-pass
replays. Retrieval defaults to once per episode (first-step query); a flag
switches to per-step refresh. Ablation modes force either memory block empty;
vanilla skips the compressor entirely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import memory as M
from .compressor import CompressorParams, parse_action
from .env import L_WINDOW, MiniGuiEnv, TaskSpec, Trajectory
from .errors import ConfigError, InvariantError
from .policy import Policy, sample_action_tokens

MODES = ("vanilla", "no-working", "no-experiential", "full")


@dataclass
class RunSettings:
    mode: str = "full"
    m: int = 5
    cap: int = M.DEFAULT_CAP
    window: int = L_WINDOW
    chunk: int = 4
    greedy: bool = True
    refresh_retrieval: bool = False
    check_cache: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")


class ContextBuilder:
    """Assembles the weaved decoder context for successive steps of one episode."""

    def __init__(
        self,
        policy: Policy,
        phi: CompressorParams | None,
        bank: M.Bank | None,
        settings: RunSettings,
        proc_cache: dict | None = None,
        exclude_ids=(),
        preset_retrieved=None,
    ) -> None:
        if settings.mode != "vanilla" and phi is None:
            raise ConfigError(f"mode {settings.mode!r} requires compressor parameters")
        self.policy = policy
        self.phi = phi
        self.bank = bank
        self.s = settings
        self.proc_cache = proc_cache
        self.exclude_ids = tuple(exclude_ids)
        self.working = M.WorkingMemoryState()
        self.retrieved: list | None = list(preset_retrieved) if preset_retrieved is not None else None
        self.proc_blocks: list = []
        if (
            self.retrieved is not None
            and bank is not None
            and settings.mode not in ("vanilla", "no-experiential")
        ):
            self.proc_blocks = M.assemble_procedural(
                self.retrieved, bank, self.phi, self.policy, cache=self.proc_cache
            )

    def _retrieve(self, instruction, window_events, obs) -> None:
        if self.bank is None or len(self.bank) == 0:
            self.retrieved = []
            self.proc_blocks = []
            return
        q = self.policy.query_vector(instruction, window_events, obs)
        self.retrieved = M.retrieve(q, self.bank, self.s.m, exclude_ids=self.exclude_ids)
        self.proc_blocks = M.assemble_procedural(
            self.retrieved, self.bank, self.phi, self.policy, cache=self.proc_cache
        )

    def context(self, instruction, events, obs) -> M.WeavedContext:
        """Context for deciding step t = len(events) + 1."""
        t = len(events) + 1
        lo = max(0, t - 1 - self.s.window)
        window_events = tuple(events[lo : t - 1])
        rows, n_t = self.policy.embed_context(instruction, window_events, obs)

        if self.s.mode == "vanilla":
            return M.WeavedContext(
                rows=rows, m_prime=0, j_t=0, n_t=n_t, k=0, source_tags=(("ordinary", None),)
            )

        proc: list = []
        if self.s.mode != "no-experiential":
            if self.retrieved is None or self.s.refresh_retrieval:
                self._retrieve(instruction, window_events, obs)
            proc = self.proc_blocks
        work: list = []
        if self.s.mode != "no-working":
            work = M.assemble_working(
                events, t, self.s.window, self.s.chunk, self.phi, self.policy, self.working
            )
            if self.s.check_cache:
                fresh = M.assemble_working(
                    events, t, self.s.window, self.s.chunk, self.phi, self.policy, None
                )
                for (j, z), (j2, z2) in zip(work, fresh):
                    if j != j2 or not np.array_equal(z.data, z2.data):
                        raise InvariantError(f"working chunk {j} cache diverges from recomputation")
        return M.weave(proc, work, rows, n_t, self.phi, cap=self.s.cap)


@dataclass
class EpisodeResult:
    task: TaskSpec
    trajectory: Trajectory
    success: bool
    steps: int
    hit_max: bool
    latent_rows: list = field(default_factory=list)
    block_counts: list = field(default_factory=list)  # (m_prime, j_t) per step
    action_ids: list = field(default_factory=list)
    retrieved: list = field(default_factory=list)
    wall_seconds: float = 0.0


def run_episode(
    policy: Policy,
    phi: CompressorParams | None,
    bank: M.Bank | None,
    task: TaskSpec,
    settings: RunSettings,
    rng=None,
    proc_cache: dict | None = None,
    exclude_ids=(),
) -> EpisodeResult:
    """Roll one episode under the policy with the configured memory mode."""
    start = time.perf_counter()
    env = MiniGuiEnv(task)
    obs = env.reset()
    builder = ContextBuilder(policy, phi, bank, settings, proc_cache=proc_cache, exclude_ids=exclude_ids)
    latent_rows = []
    block_counts = []
    action_ids = []
    done = False
    with ad.no_grad():
        while not done:
            ctx = builder.context(task.instruction, env.events, obs)
            M.check_budget(ctx, settings.cap)
            if settings.mode == "vanilla" and ctx.latent_rows != 0:
                raise InvariantError("vanilla mode produced latent rows")
            latent_rows.append(ctx.latent_rows)
            block_counts.append((ctx.m_prime, ctx.j_t))
            ids = sample_action_tokens(policy, ctx.rows, rng=rng, greedy=settings.greedy)
            action_ids.append(tuple(ids))
            obs, done, _ = env.step(parse_action(*ids))
    traj = env.trajectory()
    return EpisodeResult(
        task=task,
        trajectory=traj,
        success=traj.reward == 1,
        steps=env.steps,
        hit_max=env.hit_max,
        latent_rows=latent_rows,
        block_counts=block_counts,
        action_ids=action_ids,
        retrieved=list(builder.retrieved or []),
        wall_seconds=time.perf_counter() - start,
    )
