"""Dual-scale memory: external trajectory bank with Top-M retrieval,
expired-prefix chunk compression, and weaving into the decoder context.

Bank file layout (little-endian):

    magic "LMBK0001" | u32 version | u32 h | u32 count | entries...

    entry: u16 |instruction| + u16 ids
           u16 |events|, per event (u16 |obs| + u16 ids, 3 x u16 action ids)
           u8 outcome (1 = succ, 0 = fail)
           h x f8 key vector

A companion ".idx" file stores one u64 byte offset per entry for random
access.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .compressor import CompressorParams, compress, parse_action, serialize_action
from .env import Action, Segment, Trajectory
from .errors import ArtifactError, ContractError, InvariantError

BANK_MAGIC = b"LMBK0001"
DEFAULT_CAP = 12  # ceiling on retrieved blocks plus working chunks


@dataclass
class BankEntry:
    entry_id: int
    instruction: tuple
    events: Segment
    outcome: str  # "succ" | "fail"
    key: np.ndarray  # unit-norm (h,)


@dataclass
class Bank:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def keys(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.key for e in self.entries])

    def subset(self, n: int) -> "Bank":
        """First-n prefix; bank files are shuffled at build time so prefixes
        stay representative."""
        return Bank(entries=self.entries[:n])


def build_bank(trajectories, policy) -> Bank:
    """One entry per completed trajectory, keyed by the pooled encoder state."""
    entries = []
    for i, traj in enumerate(trajectories):
        if traj.outcome not in ("succ", "fail"):
            raise ContractError("bank holds only completed trajectories")
        key = policy.key_vector(traj.instruction, traj.events)
        entries.append(
            BankEntry(
                entry_id=i,
                instruction=tuple(traj.instruction),
                events=tuple(traj.events),
                outcome=traj.outcome,
                key=key,
            )
        )
    return Bank(entries=entries)


def retrieve(query: np.ndarray, bank: Bank, m: int, exclude_ids=()) -> list:
    """Top-M entry ids by inner product of unit vectors, ties to lower id.

    Pure numpy on frozen keys: no gradient can flow through the selection.
    """
    if m <= 0 or not bank.entries:
        return []
    excluded = set(exclude_ids)
    candidates = [e for e in bank.entries if e.entry_id not in excluded]
    if not candidates:
        return []
    sims = np.array([float(e.key @ query) for e in candidates])
    order = sorted(range(len(candidates)), key=lambda i: (-sims[i], candidates[i].entry_id))
    return [candidates[i].entry_id for i in order[: min(m, len(candidates))]]


def retrieval_query(policy, instruction, window_events, obs) -> np.ndarray:
    return policy.query_vector(instruction, window_events, obs)


# ---------------------------------------------------------------------------
# Latent assembly
# ---------------------------------------------------------------------------


@dataclass
class WorkingMemoryState:
    """Per-episode cache of compressed complete chunks."""

    cache: dict = field(default_factory=dict)  # chunk index -> (K, d) ndarray

    def clear(self) -> None:
        self.cache.clear()


@dataclass
class WeavedContext:
    """Ordered decoder input: procedural, working, then ordinary rows."""

    rows: ad.Tensor
    m_prime: int
    j_t: int
    n_t: int
    k: int
    source_tags: tuple = ()

    @property
    def latent_rows(self) -> int:
        return (self.m_prime + self.j_t) * self.k


def assemble_procedural(indices, bank: Bank, phi: CompressorParams, policy, cache=None) -> list:
    """Compress retrieved trajectories in rank order -> list of (entry_id, Z)."""
    by_id = {e.entry_id: e for e in bank.entries}
    out = []
    for entry_id in indices:
        entry = by_id[entry_id]
        if cache is not None and entry_id in cache:
            z = cache[entry_id]
        else:
            z = compress(phi, policy, entry.events, entry.outcome)
            if cache is not None:
                cache[entry_id] = z
        out.append((entry_id, z))
    return out


def expired_prefix_len(t: int, window: int) -> int:
    return max(0, t - window - 1)


def chunk_bounds(expired_len: int, w: int) -> list:
    """Left-aligned chunk [start, stop) event index pairs covering the prefix."""
    return [(j * w, min((j + 1) * w, expired_len)) for j in range((expired_len + w - 1) // w)]


def assemble_working(
    events,
    t: int,
    window: int,
    w: int,
    phi: CompressorParams,
    policy,
    state: WorkingMemoryState | None = None,
) -> list:
    """Compress the expired prefix in temporal chunk order -> list of (idx, Z).

    Complete chunks (exactly w events) are served from the per-episode cache;
    the trailing partial chunk is recompressed each step. Chunk boundaries
    depend only on w, so a complete chunk's block is step-invariant.
    """
    expired = expired_prefix_len(t, window)
    out = []
    for j, (lo, hi) in enumerate(chunk_bounds(expired, w)):
        complete = hi - lo == w
        if state is not None and complete and j in state.cache:
            z = state.cache[j]
        else:
            z = compress(phi, policy, tuple(events[lo:hi]), None)
            if state is not None and complete:
                state.cache[j] = z
        out.append((j, z))
    return out


def weave(
    proc_blocks,
    work_blocks,
    ordinary_rows: ad.Tensor,
    n_t: int,
    phi: CompressorParams,
    cap: int = DEFAULT_CAP,
) -> WeavedContext:
    """U = [Z_proc + b_proc ; Z_work + b_work ; ordinary embeddings].

    If the block budget overflows the cap, lowest-ranked procedural blocks
    are dropped first, then oldest working chunks.
    """
    if ordinary_rows.data.shape[0] == 0:
        raise ContractError("weave requires non-empty ordinary embeddings")
    proc = list(proc_blocks)
    work = list(work_blocks)
    while len(proc) + len(work) > cap and proc:
        proc.pop()  # lowest retrieval rank sits last
    while len(proc) + len(work) > cap and work:
        work.pop(0)  # oldest chunk sits first

    pieces = []
    tags = []
    for entry_id, z in proc:
        pieces.append(ad.add(z, _row(phi.params["b_proc"])))
        tags.append(("procedural", entry_id))
    for idx, z in work:
        pieces.append(ad.add(z, _row(phi.params["b_work"])))
        tags.append(("working", idx))
    pieces.append(ordinary_rows)
    tags.append(("ordinary", None))
    rows = ad.concat_rows(pieces) if len(pieces) > 1 else pieces[0]
    return WeavedContext(
        rows=rows,
        m_prime=len(proc),
        j_t=len(work),
        n_t=n_t,
        k=phi.k,
        source_tags=tuple(tags),
    )


def _row(vec: ad.Tensor) -> ad.Tensor:
    def bwd(g):
        return (g.reshape(vec.data.shape),)

    if ad.grad_enabled():
        return ad.Tensor(vec.data.reshape(1, -1), parents=(vec,), bwd=bwd)
    return ad.Tensor(vec.data.reshape(1, -1))


def check_budget(ctx: WeavedContext, cap: int = DEFAULT_CAP) -> None:
    total = ctx.rows.data.shape[0]
    expect = ctx.latent_rows + ctx.n_t
    if total != expect:
        raise InvariantError(f"context rows {total} != (M'+J)K + n_t = {expect}")
    if ctx.m_prime + ctx.j_t > cap:
        raise InvariantError(f"latent budget exceeded: {ctx.m_prime}+{ctx.j_t} > {cap}")


# ---------------------------------------------------------------------------
# Bank persistence
# ---------------------------------------------------------------------------


def save_bank(path, bank: Bank, h: int) -> None:
    path = Path(path)
    offsets = []
    body = bytearray()
    for e in bank.entries:
        offsets.append(len(body))
        body += struct.pack("<H", len(e.instruction))
        body += struct.pack(f"<{len(e.instruction)}H", *e.instruction)
        body += struct.pack("<H", len(e.events))
        for obs, action in e.events:
            body += struct.pack("<H", len(obs))
            body += struct.pack(f"<{len(obs)}H", *obs)
            body += struct.pack("<3H", *serialize_action(action))
        body += struct.pack("<B", 1 if e.outcome == "succ" else 0)
        body += np.ascontiguousarray(e.key, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<III", 1, h, len(bank.entries)))
        fh.write(bytes(body))
    with open(path.with_suffix(path.suffix + ".idx"), "wb") as fh:
        fh.write(struct.pack(f"<{len(offsets)}Q", *offsets))


def load_bank(path) -> Bank:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"bank not found: {path}")
    blob = path.read_bytes()
    if blob[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise ArtifactError(f"bad bank magic in {path}")
    _, h, count = struct.unpack_from("<III", blob, len(BANK_MAGIC))
    pos = len(BANK_MAGIC) + 12
    entries = []
    for entry_id in range(count):
        (n_instr,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        instruction = struct.unpack_from(f"<{n_instr}H", blob, pos)
        pos += 2 * n_instr
        (n_events,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        events = []
        for _ in range(n_events):
            (n_obs,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            obs = struct.unpack_from(f"<{n_obs}H", blob, pos)
            pos += 2 * n_obs
            triple = struct.unpack_from("<3H", blob, pos)
            pos += 6
            action = parse_action(*triple)
            events.append((obs, action if action is not None else Action("NOOP")))
        (outcome_byte,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        key = np.frombuffer(blob, dtype="<f8", count=h, offset=pos).copy()
        pos += 8 * h
        entries.append(
            BankEntry(
                entry_id=entry_id,
                instruction=tuple(instruction),
                events=tuple(events),
                outcome="succ" if outcome_byte else "fail",
                key=key,
            )
        )
    return Bank(entries=entries)


def bank_trajectories(bank: Bank, outcome: str | None = None) -> list:
    """View bank entries as trajectories, optionally filtered by outcome."""
    out = []
    for e in bank.entries:
        if outcome is not None and e.outcome != outcome:
            continue
        out.append(
            Trajectory(
                instruction=e.instruction,
                events=e.events,
                outcome=e.outcome,
                reward=1 if e.outcome == "succ" else 0,
            )
        )
    return out
