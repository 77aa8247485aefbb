"""Compressor: action serialization, outcome table, latent block contract."""

import numpy as np
import pytest

import latentmem.vocab as V
from latentmem import autodiff as ad
from latentmem import env as E
from latentmem.compressor import (
    compress,
    init_compressor,
    outcome_embed,
    parse_action,
    serialize_action,
)
from latentmem.env import Action
from latentmem.errors import ContractError
from latentmem.policy import Policy


@pytest.fixture(scope="module")
def policy():
    p = Policy(seed=2)
    p.freeze()
    return p


@pytest.fixture(scope="module")
def segment():
    task = E.generate_tasks({"trap": 1.0}, 1, 4, depths=E.EVAL_DEPTHS)[0]
    return E.expert_rollout(task).events


def test_serialize_click():
    assert serialize_action(Action("CLICK", widget=5)) == (V.CLICK, V.widget_token(5), V.PAD)


def test_serialize_back():
    assert serialize_action(Action("BACK")) == (V.BACK, V.PAD, V.PAD)


def _enumerate_actions():
    actions = [Action("BACK"), Action("STOP"), Action("NOOP")]
    actions += [Action("SCROLL", direction=d) for d in ("up", "down")]
    actions += [Action("STOP", answer=V.value_token(i)) for i in range(4)]
    for w in range(V.N_WIDGET_IDS):
        actions.append(Action("CLICK", widget=w))
        for tok in range(V.VAL_BASE, V.VAL_BASE + 4):
            actions.append(Action("TYPE", widget=w, token=tok))
    return actions


def test_serialization_injective_over_action_space():
    triples = [serialize_action(a) for a in _enumerate_actions()]
    assert len(triples) == len(set(triples))


def test_parse_round_trips():
    for action in _enumerate_actions():
        triple = serialize_action(action)
        back = parse_action(*triple)
        if action.op == "NOOP":
            assert back is None
        else:
            assert serialize_action(back) == triple


def test_parse_rejects_malformed():
    assert parse_action(V.CLICK, V.PAD, V.PAD) is None
    assert parse_action(V.TYPE, V.value_token(0), V.PAD) is None
    assert parse_action(V.SCROLL, V.PAD, V.PAD) is None
    assert parse_action(V.PAD, V.PAD, V.PAD) is None


def test_outcome_rows_distinct_and_deterministic():
    phi = init_compressor(3)
    rows = {y: outcome_embed(phi, y).data.copy() for y in ("succ", "fail", None)}
    assert not np.array_equal(rows["succ"], rows["fail"])
    assert not np.array_equal(rows["succ"], rows[None])
    again = outcome_embed(phi, "succ").data
    assert np.array_equal(rows["succ"], again)


def test_compress_output_shape_fixed(policy, segment):
    phi = init_compressor(0)
    for length in (1, 2, len(segment)):
        z = compress(phi, policy, segment[:length], "succ")
        assert z.shape == (phi.k, phi.d) == (8, 64)
        assert np.isfinite(z.data).all()


def test_compress_empty_segment_rejected(policy):
    with pytest.raises(ContractError):
        compress(init_compressor(0), policy, (), "succ")


def test_outcome_sensitivity(policy, segment):
    phi = init_compressor(1)
    z_succ = compress(phi, policy, segment, "succ")
    z_fail = compress(phi, policy, segment, "fail")
    assert float(np.abs(z_succ.data - z_fail.data).max()) > 0


def test_compress_gradients_reach_phi_only(policy, segment):
    phi = init_compressor(2)
    z = compress(phi, policy, segment[:2], None)
    grads = ad.backward(ad.mean(ad.mul(z, z)))
    assert phi.params["queries"] in grads
    assert phi.params["proj"] in grads
    for name, t in policy.params.items():
        assert t.grad is None or not np.any(t.grad), name


def test_compress_gradient_matches_finite_differences(policy, segment):
    phi = init_compressor(4)
    probe = ad.tensor(np.random.default_rng(0).normal(size=(8, 64)))

    def loss_fn():
        z = compress(phi, policy, segment[:2], "fail")
        return ad.sum_all(ad.mul(z, probe))

    wrt = [phi.params["queries"], phi.params["proj"], phi.params["gamma"], phi.params["blk0.wv"]]
    ad.zero_grads(wrt)
    ad.backward(loss_fn())
    err = ad.check_gradients(lambda: loss_fn().item(), wrt, rng=np.random.default_rng(1), max_entries=4)
    assert err < 1e-4, err


def test_outcome_flags_ablatable(policy, segment):
    phi = init_compressor(5)
    phi.outcome_embed_in_queries = False
    z_succ = compress(phi, policy, segment, "succ")
    z_fail = compress(phi, policy, segment, "fail")
    # Outcome still enters through the encoder prefix token.
    assert not np.array_equal(z_succ.data, z_fail.data)
    phi.outcome_token_in_encoder = False
    z2_succ = compress(phi, policy, segment, "succ")
    z2_fail = compress(phi, policy, segment, "fail")
    assert np.array_equal(z2_succ.data, z2_fail.data)
