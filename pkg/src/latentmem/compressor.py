"""Trajectory-to-latent compressor: learned queries cross-attend to frozen
encoder features of a segment and project to a fixed block of soft tokens.

The block is never decoded back to tokens; it is consumed directly as rows
of the policy's input embedding sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vocab as V
from .env import Action, Segment
from .errors import ContractError

OUTCOME_ROW = {"succ": 0, "fail": 1, None: 2}
ACTION_TOKENS = 3  # fixed serialization length S


def serialize_action(action: Action) -> tuple:
    """Injective 3-token encoding (type, arg-1, arg-2), padded where absent."""
    if action.op == "CLICK":
        return (V.CLICK, V.widget_token(action.widget), V.PAD)
    if action.op == "TYPE":
        return (V.TYPE, V.widget_token(action.widget), action.token)
    if action.op == "SCROLL":
        return (V.SCROLL, V.DIR_DOWN if action.direction == "down" else V.DIR_UP, V.PAD)
    if action.op == "BACK":
        return (V.BACK, V.PAD, V.PAD)
    if action.op == "STOP":
        return (V.STOP, action.answer if action.answer is not None else V.PAD, V.PAD)
    return (V.PAD, V.PAD, V.PAD)  # NOOP sentinel for unparseable attempts


def parse_action(t1: int, t2: int, t3: int) -> Action | None:
    """Inverse of serialize_action; None when the triple is malformed."""
    if t1 == V.CLICK:
        return Action("CLICK", widget=V.widget_id_of(t2)) if V.is_widget_token(t2) else None
    if t1 == V.TYPE:
        return Action("TYPE", widget=V.widget_id_of(t2), token=t3) if V.is_widget_token(t2) else None
    if t1 == V.SCROLL:
        if t2 == V.DIR_DOWN:
            return Action("SCROLL", direction="down")
        if t2 == V.DIR_UP:
            return Action("SCROLL", direction="up")
        return None
    if t1 == V.BACK:
        return Action("BACK")
    if t1 == V.STOP:
        return Action("STOP", answer=None if t2 == V.PAD else t2)
    return None


@dataclass
class LatentBlock:
    """K soft memory tokens plus provenance bookkeeping."""

    z: ad.Tensor  # (K, d)
    provenance: str  # "procedural" | "working"
    source_id: object = None
    outcome: str | None = None


@dataclass
class CompressorParams:
    """The complete trainable parameter set of the system."""

    params: dict = field(default_factory=dict)
    k: int = 8
    h: int = 64
    d: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    outcome_token_in_encoder: bool = True
    outcome_embed_in_queries: bool = True

    def tensors(self) -> dict:
        return self.params

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def clone(self) -> "CompressorParams":
        out = CompressorParams(
            params={name: ad.tensor(t.data.copy(), trainable=False) for name, t in self.params.items()},
            k=self.k,
            h=self.h,
            d=self.d,
            n_heads=self.n_heads,
            n_blocks=self.n_blocks,
            outcome_token_in_encoder=self.outcome_token_in_encoder,
            outcome_embed_in_queries=self.outcome_embed_in_queries,
        )
        return out

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.trainable = flag


def init_compressor(
    seed: int,
    k: int = 8,
    h: int = 64,
    d: int = 64,
    n_heads: int = 4,
    n_blocks: int = 2,
) -> CompressorParams:
    rng = np.random.default_rng(np.random.SeedSequence([777, seed]))
    p: dict[str, ad.Tensor] = {}

    def param(name, arr):
        p[name] = ad.tensor(arr, trainable=True)

    param("queries", rng.normal(scale=0.02, size=(k, h)))
    for i in range(n_blocks):
        for nm in ("wq", "wk", "wv", "wo"):
            param(f"blk{i}.{nm}", rng.normal(scale=0.02, size=(h, h)))
        param(f"blk{i}.ln_q.g", np.ones(h))
        param(f"blk{i}.ln_q.b", np.zeros(h))
        param(f"blk{i}.ln_f.g", np.ones(h))
        param(f"blk{i}.ln_f.b", np.zeros(h))
        param(f"blk{i}.fc1", rng.normal(scale=0.02, size=(h, 4 * h)))
        param(f"blk{i}.fc1b", np.zeros(4 * h))
        param(f"blk{i}.fc2", rng.normal(scale=0.02, size=(4 * h, h)))
        param(f"blk{i}.fc2b", np.zeros(h))
    param("ln_out.g", np.ones(h))
    param("ln_out.b", np.zeros(h))
    # Near-identity projection (h == d) so training starts close to
    # pass-through encoder features.
    param("proj", np.eye(h, d) + rng.normal(scale=0.02, size=(h, d)))
    # Orthogonal outcome rows keep succ / fail / unknown distinguishable
    # from the first step.
    q_mat, _ = np.linalg.qr(rng.normal(size=(h, 3)))
    param("gamma", q_mat.T.copy())
    param("b_proc", np.zeros(d))
    param("b_work", np.zeros(d))
    return CompressorParams(params=p, k=k, h=h, d=d, n_heads=n_heads, n_blocks=n_blocks)


def outcome_embed(phi: CompressorParams, outcome) -> ad.Tensor:
    """Row lookup in the learned outcome table; shape (1, h)."""
    if outcome not in OUTCOME_ROW:
        raise ContractError(f"outcome must be 'succ', 'fail' or None, got {outcome!r}")
    row = OUTCOME_ROW[outcome]
    return ad.slice_rows(phi.params["gamma"], row, row + 1)


def compress(phi: CompressorParams, policy, segment: Segment, outcome) -> ad.Tensor:
    """Map a segment plus outcome to a (K, d) latent block.

    The encoder runs detached: gradients reach the compressor parameters
    only, never the frozen policy.
    """
    if not segment:
        raise ContractError("compress() requires a non-empty segment")
    p = phi.params
    with ad.no_grad():
        enc_outcome = outcome if phi.outcome_token_in_encoder else None
        h_feat = policy.encode_segment(segment, enc_outcome)
    h_feat = ad.tensor(h_feat.data)

    q = p["queries"]
    if phi.outcome_embed_in_queries:
        q = ad.add(q, outcome_embed(phi, outcome))
    for i in range(phi.n_blocks):
        attended = ad.multi_head_attention(
            ad.layer_norm(q, p[f"blk{i}.ln_q.g"], p[f"blk{i}.ln_q.b"]),
            h_feat,
            p[f"blk{i}.wq"],
            p[f"blk{i}.wk"],
            p[f"blk{i}.wv"],
            p[f"blk{i}.wo"],
            phi.n_heads,
        )
        q = ad.add(q, attended)
        hidden = ad.layer_norm(q, p[f"blk{i}.ln_f.g"], p[f"blk{i}.ln_f.b"])
        hidden = ad.gelu(ad.add(ad.matmul(hidden, p[f"blk{i}.fc1"]), p[f"blk{i}.fc1b"]))
        hidden = ad.add(ad.matmul(hidden, p[f"blk{i}.fc2"]), p[f"blk{i}.fc2b"])
        q = ad.add(q, hidden)
    q = ad.layer_norm(q, p["ln_out.g"], p["ln_out.b"])
    return ad.matmul(q, p["proj"])


def compress_block(phi, policy, segment, outcome, provenance, source_id=None) -> LatentBlock:
    return LatentBlock(
        z=compress(phi, policy, segment, outcome),
        provenance=provenance,
        source_id=source_id,
        outcome=outcome,
    )
