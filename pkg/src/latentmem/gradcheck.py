"""Finite-difference gradient suite: every catalog op plus the full Stage-1
loss, checked against central differences at 64-bit precision."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def op_fd_cases():
    """Per-op builders: make(rng) -> (loss_fn() -> Tensor, wrt tensors).

    loss_fn rebuilds the graph from the wrt tensors' current data, so the
    finite-difference probe can perturb entries in place.
    """

    def case_matmul(rng):
        a = ad.tensor(rng.normal(size=(3, 4)), trainable=True)
        b = ad.tensor(rng.normal(size=(4, 2)), trainable=True)
        r = ad.tensor(rng.normal(size=(3, 2)))
        return lambda: ad.sum_all(ad.mul(ad.matmul(a, b), r)), [a, b]

    def case_add(rng):
        a = ad.tensor(rng.normal(size=(3, 4)), trainable=True)
        b = ad.tensor(rng.normal(size=(1, 4)), trainable=True)
        r = ad.tensor(rng.normal(size=(3, 4)))
        return lambda: ad.sum_all(ad.mul(ad.add(a, b), r)), [a, b]

    def case_scale(rng):
        a = ad.tensor(rng.normal(size=(5,)), trainable=True)
        r = ad.tensor(rng.normal(size=(5,)))
        return lambda: ad.sum_all(ad.mul(ad.scale(a, -1.7), r)), [a]

    def case_concat(rng):
        a = ad.tensor(rng.normal(size=(2, 3)), trainable=True)
        b = ad.tensor(rng.normal(size=(4, 3)), trainable=True)
        r = ad.tensor(rng.normal(size=(6, 3)))
        return lambda: ad.sum_all(ad.mul(ad.concat_rows([a, b]), r)), [a, b]

    def case_softmax(rng):
        a = ad.tensor(rng.normal(size=(3, 5)), trainable=True)
        r = ad.tensor(rng.normal(size=(3, 5)))
        return lambda: ad.sum_all(ad.mul(ad.row_softmax(a), r)), [a]

    def case_layer_norm(rng):
        x = ad.tensor(rng.normal(size=(4, 6)), trainable=True)
        g = ad.tensor(rng.normal(size=6), trainable=True)
        b = ad.tensor(rng.normal(size=6), trainable=True)
        r = ad.tensor(rng.normal(size=(4, 6)))
        return lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), r)), [x, g, b]

    def case_gelu(rng):
        a = ad.tensor(rng.normal(size=(4, 4)), trainable=True)
        r = ad.tensor(rng.normal(size=(4, 4)))
        return lambda: ad.sum_all(ad.mul(ad.gelu(a), r)), [a]

    def case_gather(rng):
        table = ad.tensor(rng.normal(size=(7, 3)), trainable=True)
        ids = rng.integers(0, 7, size=5)
        r = ad.tensor(rng.normal(size=(5, 3)))
        return lambda: ad.sum_all(ad.mul(ad.embedding_gather(table, ids), r)), [table]

    def case_attention(rng):
        q = ad.tensor(rng.normal(size=(3, 4)), trainable=True)
        k = ad.tensor(rng.normal(size=(5, 4)), trainable=True)
        v = ad.tensor(rng.normal(size=(5, 2)), trainable=True)
        mask = np.triu(np.full((3, 5), -1e9), k=3)
        r = ad.tensor(rng.normal(size=(3, 2)))
        return lambda: ad.sum_all(ad.mul(ad.scaled_dot_attention(q, k, v, mask), r)), [q, k, v]

    def case_mean(rng):
        a = ad.tensor(rng.normal(size=(3, 3)), trainable=True)
        return lambda: ad.mean(ad.mul(a, a)), [a]

    def case_cross_entropy(rng):
        logits = ad.tensor(rng.normal(size=9), trainable=True)
        t = int(rng.integers(0, 9))
        return lambda: ad.cross_entropy(logits, t), [logits]

    def case_kl(rng):
        lp, lq = rng.normal(size=6), rng.normal(size=6)
        p = ad.tensor(np.exp(lp) / np.exp(lp).sum(), trainable=True)
        q = ad.tensor(np.exp(lq) / np.exp(lq).sum(), trainable=True)
        return lambda: ad.kl_divergence(p, q), [p, q]

    def case_l2norm(rng):
        x = ad.tensor(rng.normal(size=(3, 5)) + 0.5, trainable=True)
        r = ad.tensor(rng.normal(size=(3, 5)))
        return lambda: ad.sum_all(ad.mul(ad.l2_normalize_rows(x), r)), [x]

    def case_multi_head(rng):
        d = 8
        wq = ad.tensor(rng.normal(size=(d, d)) * 0.3, trainable=True)
        wk = ad.tensor(rng.normal(size=(d, d)) * 0.3, trainable=True)
        wv = ad.tensor(rng.normal(size=(d, d)) * 0.3, trainable=True)
        wo = ad.tensor(rng.normal(size=(d, d)) * 0.3, trainable=True)
        q_in = ad.tensor(rng.normal(size=(3, d)))
        kv = ad.tensor(rng.normal(size=(6, d)))

        def loss_fn():
            out = ad.multi_head_attention(q_in, kv, wq, wk, wv, wo, 4)
            return ad.mean(ad.mul(out, out))

        return loss_fn, [wq, wk, wv, wo]

    return [
        ("matmul", case_matmul),
        ("add", case_add),
        ("scale", case_scale),
        ("concat-rows", case_concat),
        ("row-softmax", case_softmax),
        ("layer-norm", case_layer_norm),
        ("gelu", case_gelu),
        ("embedding-gather", case_gather),
        ("scaled-dot-attention", case_attention),
        ("mean", case_mean),
        ("cross-entropy", case_cross_entropy),
        ("kl-divergence", case_kl),
        ("l2-normalize-rows", case_l2norm),
        ("multi-head-attention", case_multi_head),
    ]


def run_op_gradcheck(n_seeds: int = 20) -> dict:
    """Worst relative FD error per op over n_seeds random instances."""
    worst: dict[str, float] = {}
    for name, make in op_fd_cases():
        err = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 + seed)
            loss_fn, wrt = make(rng)
            ad.zero_grads(wrt)
            ad.backward(loss_fn())
            err = max(err, ad.check_gradients(lambda: loss_fn().item(), wrt, rng=np.random.default_rng(seed)))
        worst[name] = err
    return worst


def stage1_loss_gradcheck(policy, bank, cfg, n_seeds: int = 3, entries_per_tensor: int = 2) -> float:
    """FD-check the complete Stage-1 loss against every compressor tensor.

    Sampled entries per tensor keep the check inside the runtime budget while
    touching all parameter matrices.
    """
    from .compressor import init_compressor
    from .training import build_stage1_samples, stage1_sample_loss

    worst = 0.0
    for seed in range(n_seeds):
        phi = init_compressor(seed + 17)
        sample = build_stage1_samples(bank, 1, cfg.l_window, 300 + seed)[0]

        def loss_fn():
            loss, _, _ = stage1_sample_loss(sample, policy, phi, bank, cfg)
            return loss

        wrt = list(phi.tensors().values())
        ad.zero_grads(wrt)
        ad.backward(loss_fn())
        worst = max(
            worst,
            ad.check_gradients(
                lambda: loss_fn().item(),
                wrt,
                rng=np.random.default_rng(seed),
                max_entries=entries_per_tensor,
            ),
        )
    return worst
