"""Transformer contracts: shapes, masking, loss semantics, input gradients."""

import math

import numpy as np
import pytest

import advseq._kernels as K
import advseq.autodiff as ad
from advseq.autodiff import GradTape, Tensor
from advseq.errors import ConfigError, ContractError, SequenceLengthError
from advseq.transformer import AttentionMap, Transformer, TransformerConfig

from fd_oracle import max_rel_err, numeric_grad

PAD, BOS, EOS = 0, 1, 2


def small_config(**kw):
    base = dict(
        src_vocab_size=13,
        trg_vocab_size=11,
        num_layers=2,
        model_dim=16,
        num_heads=4,
        ff_dim=32,
        max_len=12,
        dropout_rate=0.0,
    )
    base.update(kw)
    return TransformerConfig(**base)


X = np.array([5, 6, 7, 4, EOS])
Y = np.array([4, 5, 6, EOS])
Z = np.array([BOS, 4, 5, 6])


# ---------------------------------------------------------------------------
# Config and shape contracts
# ---------------------------------------------------------------------------


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        small_config(model_dim=16, num_heads=5)


def test_config_rejects_bad_dropout():
    with pytest.raises(ConfigError):
        small_config(dropout_rate=1.0)


def test_encode_shape():
    model = Transformer(small_config(), seed=0)
    h = model.encode(X)
    assert h.shape == (5, 16)


def test_encode_deterministic_in_eval_mode():
    model = Transformer(small_config(), seed=0)
    h1, h2 = model.encode(X), model.encode(X)
    assert np.array_equal(h1.data, h2.data)


def test_encode_sensitive_to_one_token():
    model = Transformer(small_config(), seed=0)
    x2 = X.copy()
    x2[1] = 9
    assert not np.allclose(model.encode(X).data, model.encode(x2).data)


def test_decode_shapes_and_attention_normalization():
    model = Transformer(small_config(), seed=1)
    h = model.encode(X)
    logits, attn = model.decode(Z, h)
    assert logits.shape == (4, 11)
    assert attn.shape == (5, 4)
    assert attn.min() >= 0
    np.testing.assert_allclose(attn.sum(axis=0), 1.0, atol=1e-5)
    # wrapping validates the same invariants
    AttentionMap(attn)


def test_attention_map_validates():
    with pytest.raises(ContractError):
        AttentionMap(np.array([[0.5, 0.5], [0.1, 0.1]]))


def test_decode_requires_bos():
    model = Transformer(small_config(), seed=0)
    h = model.encode(X)
    with pytest.raises(ContractError):
        model.decode(np.array([4, 5, 6, 7]), h)


def test_overlength_input_raises():
    model = Transformer(small_config(max_len=4), seed=0)
    with pytest.raises(SequenceLengthError):
        model.encode(X)


def test_causality_is_bit_exact():
    model = Transformer(small_config(), seed=2)
    h = model.encode(X)
    base, _ = model.decode(Z, h)
    rng = np.random.default_rng(0)
    for _ in range(10):
        j = int(rng.integers(1, len(Z)))
        z2 = Z.copy()
        z2[j] = int(rng.integers(3, 11))
        pert, _ = model.decode(z2, h)
        assert np.array_equal(base.data[:j], pert.data[:j])
        if z2[j] != Z[j]:
            assert not np.array_equal(base.data[j], pert.data[j])


# ---------------------------------------------------------------------------
# Loss semantics
# ---------------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    model = Transformer(small_config(), seed=0)
    model.params["out.w"].data[:] = 0
    model.params["out.b"].data[:] = 0
    loss = model.translation_loss(X, Z, Y)
    assert loss.item() == pytest.approx(math.log(11), rel=1e-6)


def test_loss_matches_manual_recompute():
    model = Transformer(small_config(dtype="float64"), seed=3)
    h = model.encode(X)
    logits, _ = model.decode(Z, h)
    lp = logits.data - np.log(np.exp(logits.data).sum(axis=1, keepdims=True))
    manual = -lp[np.arange(len(Y)), Y].mean()
    assert model.translation_loss(X, Z, Y).item() == pytest.approx(manual, abs=1e-9)


def test_batch_loss_is_mean_of_single_losses():
    model = Transformer(small_config(dtype="float64"), seed=4)
    xa, ya, za = X, Y, Z
    xb = np.array([8, 9, EOS])
    yb = np.array([7, 3, EOS])
    zb = np.array([BOS, 7, 3])
    la = model.translation_loss(xa, za, ya).item()
    lb = model.translation_loss(xb, zb, yb).item()
    xs = np.full((2, 5), PAD, dtype=np.int64)
    ys = np.full((2, 4), PAD, dtype=np.int64)
    zs = np.full((2, 4), PAD, dtype=np.int64)
    xs[0, :5], xs[1, :3] = xa, xb
    ys[0, :4], ys[1, :3] = ya, yb
    zs[0, :4], zs[1, :3] = za, zb
    batched = model.translation_loss(xs, zs, ys).item()
    assert batched == pytest.approx((la + lb) / 2, abs=1e-10)


def test_loss_rejects_mismatched_target_lengths():
    model = Transformer(small_config(), seed=0)
    with pytest.raises(ContractError):
        model.translation_loss(X, Z, Y[:-1])


def test_dropout_is_stochastic_only_when_enabled():
    model = Transformer(small_config(dropout_rate=0.3), seed=5)
    l1 = model.translation_loss(X, Z, Y, drop_rng=np.random.default_rng(1)).item()
    l2 = model.translation_loss(X, Z, Y, drop_rng=np.random.default_rng(2)).item()
    l3 = model.translation_loss(X, Z, Y).item()
    l4 = model.translation_loss(X, Z, Y).item()
    assert l1 != l2
    assert l3 == l4


# ---------------------------------------------------------------------------
# Input-embedding gradients
# ---------------------------------------------------------------------------


def test_embedding_grads_shapes_and_param_isolation():
    model = Transformer(small_config(), seed=6)
    g_src, g_trg = model.input_embedding_grads(X, Z, Y)
    assert g_src.shape == (5, 16)
    assert g_trg.shape == (4, 16)
    assert all(p.grad is None for p in model.parameters())


def test_embedding_grads_match_finite_differences():
    cfg = small_config(model_dim=8, num_heads=2, ff_dim=16, dtype="float64")
    model = Transformer(cfg, seed=7)
    x = np.array([4, 5, EOS])
    y = np.array([3, 4, EOS])
    z = np.array([BOS, 3, 4])
    g_src, g_trg = model.input_embedding_grads(x, z, y)

    ex0 = model.src_embed.data[x].copy()
    ez0 = model.trg_embed.data[z].copy()

    def loss_from(ex, ez):
        return model.loss_from_embeddings(
            Tensor(ex[None], dtype=np.float64),
            Tensor(ez[None], dtype=np.float64),
            x[None],
            z[None],
            y[None],
        ).item()

    num_src = numeric_grad(lambda e: loss_from(e, ez0), ex0)
    num_trg = numeric_grad(lambda e: loss_from(ex0, e), ez0)
    assert max_rel_err(g_src, num_src) <= 1e-6
    assert max_rel_err(g_trg, num_trg) <= 1e-6


def test_embedding_table_grads_add_over_duplicated_sentences():
    model = Transformer(small_config(dtype="float64"), seed=8)

    def table_grad(reps):
        model.params.zero_grad()
        x2d = np.tile(X[None], (reps, 1))
        z2d = np.tile(Z[None], (reps, 1))
        y2d = np.tile(Y[None], (reps, 1))
        with GradTape() as tape:
            emb_x = ad.gather_rows(model.src_embed, x2d)
            emb_z = ad.gather_rows(model.trg_embed, z2d)
            h = model._encode_from_emb(emb_x, x2d, None)
            logits, _ = model._decode_from_emb(emb_z, z2d, h, x2d, None)
            loss = ad.nll_loss(logits, y2d, (y2d != PAD).astype(np.float64))
        tape.backward(loss)
        g = model.src_embed.grad.copy()
        model.params.zero_grad()
        return g

    g1, g2 = table_grad(1), table_grad(2)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# Greedy decoding
# ---------------------------------------------------------------------------


def test_greedy_decode_deterministic_and_capped():
    model = Transformer(small_config(), seed=9)
    out1 = model.greedy_decode(X)
    out2 = model.greedy_decode(X)
    assert np.array_equal(out1, out2)
    assert len(model.greedy_decode(X, max_steps=1)) <= 1


def test_overfit_single_pair_then_decode_it():
    cfg = small_config(model_dim=32, ff_dim=64, max_len=8)
    model = Transformer(cfg, seed=10)
    params = model.parameters()
    moments = {id(p): (np.zeros(p.size, np.float32), np.zeros(p.size, np.float32))
               for p in params}
    for step in range(1, 201):
        model.params.zero_grad()
        with GradTape() as tape:
            loss = model.translation_loss(X, Z, Y)
        tape.backward(loss)
        b1c, b2c = 1.0 - 0.9 ** step, 1.0 - 0.98 ** step
        for p in params:
            if p.grad is None:
                continue
            m, v = moments[id(p)]
            K.adam_step(p.data.reshape(-1), p.grad.reshape(-1).astype(np.float32),
                        m, v, 5e-3, 0.9, 0.98, 1e-9, b1c, b2c)
    final = model.translation_loss(X, Z, Y).item()
    assert final < 0.05
    assert np.array_equal(model.greedy_decode(X), Y)
