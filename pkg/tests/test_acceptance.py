"""Acceptance suite: ten end-to-end criteria, one pass/fail line each.

Each test prints a single ``[criterion NN] PASS/FAIL`` line with its measured
numbers before asserting, so a bare ``pytest -s tests/test_acceptance.py``
reads as a checklist. Tolerances are stated inline next to each assertion.

The tests are ordered cheap-to-expensive; criterion 7 (the paired toy
robustness experiment) dominates the runtime.
"""

import dataclasses
import time

import numpy as np
import pytest

from advseq import advgen as AG
from advseq import data as D
from advseq import evaluation as E
from advseq import training as T
from advseq.autodiff import GradTape
from advseq.bilm import BiLm, BiLmConfig
from advseq.optim import Adam
from advseq.seeding import child_rng
from advseq.transformer import Transformer, TransformerConfig


def _report(num, ok, detail):
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# 1. Gradient fidelity: analytic input-embedding gradients vs central
#    finite differences, 2-layer/dim-32 model in float64.
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    t0 = time.time()
    vocab = 24
    cfg = TransformerConfig(src_vocab_size=vocab, trg_vocab_size=vocab,
                            num_layers=2, model_dim=32, num_heads=4,
                            ff_dim=64, max_len=16, dropout_rate=0.0,
                            dtype="float64")
    model = Transformer(cfg, seed=11)
    rng = child_rng(0, "fd_acceptance")
    h = 1e-5
    worst = 0.0
    n_pairs = 20
    for _ in range(n_pairs):
        # distinct source tokens make the row gradient equal the position
        # gradient, so the embedding table is a valid perturbation point
        nx = int(rng.integers(3, 7))
        ny = int(rng.integers(3, 7))
        x = rng.choice(vocab - 4, size=nx, replace=False).astype(np.int64) + 4
        y = np.concatenate([rng.integers(4, vocab, size=ny),
                            [D.EOS_ID]]).astype(np.int64)
        pair = D.make_pair(x, y)
        g_src, _ = model.input_embedding_grads(pair.x, pair.z, pair.y)
        table = model.src_embed.data
        for i, tok in enumerate(pair.x):
            fd = np.empty(cfg.model_dim)
            for d in range(cfg.model_dim):
                orig = table[tok, d]
                table[tok, d] = orig + h
                up = float(model.translation_loss(pair.x, pair.z, pair.y).data)
                table[tok, d] = orig - h
                dn = float(model.translation_loss(pair.x, pair.z, pair.y).data)
                table[tok, d] = orig
                fd[d] = (up - dn) / (2.0 * h)
            rel = np.linalg.norm(g_src[i] - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, rel)
    took = time.time() - t0
    ok = worst <= 1e-4 and took <= 120.0
    _report(1, ok, f"max rel err {worst:.2e} (tol 1e-4) over {n_pairs} pairs, "
                   f"{took:.1f}s (limit 120s)")


# ---------------------------------------------------------------------------
# 2. Attack-word selection vs an exhaustive cosine argmax, 1000 random trials.
# ---------------------------------------------------------------------------


def _oracle_select(cand_ids, e_orig, g, emb):
    best_id, best_sim = None, -np.inf
    gn = np.linalg.norm(g)
    if gn == 0.0:
        return None
    for c in cand_ids:
        diff = emb[c].astype(np.float64) - e_orig
        dn = np.linalg.norm(diff)
        if dn == 0.0:
            continue
        sim = float(diff @ g) / (dn * gn)
        if sim > best_sim or (sim == best_sim and best_id is not None
                              and c < best_id):
            best_id, best_sim = int(c), sim
    return best_id


def test_criterion_02_selection_oracle():
    rng = child_rng(0, "sel_oracle")
    trials, matches = 1000, 0
    for t in range(trials):
        v = int(rng.integers(12, 40))
        emb = rng.standard_normal((v, 8))
        orig = int(rng.integers(4, v))
        k = int(rng.integers(1, 11))
        pool = [i for i in range(v) if i != orig]
        cand_ids = rng.choice(pool, size=min(k, len(pool)), replace=False)
        cand_ids = np.sort(cand_ids).astype(np.int64)
        if t % 10 == 0 and len(cand_ids):  # duplicate-embedding candidate
            emb[cand_ids[0]] = emb[orig]
        g = rng.standard_normal(8)
        got = AG.select_adversarial_word(
            AG.CandidateSet(position=0, token_ids=cand_ids),
            emb[orig], g, emb)
        want = _oracle_select(cand_ids, emb[orig].astype(np.float64),
                              g.astype(np.float64), emb)
        matches += got == want
    ok = matches == trials
    _report(2, ok, f"{matches}/{trials} exact matches against the "
                   f"exhaustive argmax (need 100%)")


# ---------------------------------------------------------------------------
# 3. Perturbation contract suite over gamma in {0, 0.15, 0.25, 0.5, 1.0}.
# ---------------------------------------------------------------------------


def test_criterion_03_perturbation_contracts():
    rng = child_rng(0, "contract_suite")
    gammas = [0.0, 0.15, 0.25, 0.5, 1.0]
    v, dim, n_cand = 30, 8, 6
    emb = rng.standard_normal((v, dim))
    cases = passed = 0
    for case in range(500):
        gamma = gammas[case % len(gammas)]
        m = int(rng.integers(2, 13))
        s = rng.integers(4, v, size=m).astype(np.int64)
        if m >= 3 and case % 3 == 0:
            s[0] = D.BOS_ID  # sprinkle special ids into some sentences
        if m >= 3 and case % 4 == 0:
            s[-1] = D.EOS_ID
        q = rng.random((m, v))
        d = AG.source_position_distribution(s)
        g = rng.standard_normal((m, dim))
        seed_key = ("case", case)
        res = AG.adv_gen(s, q, d, g, gamma, child_rng(17, *seed_key), emb,
                         n=n_cand)
        res2 = AG.adv_gen(s, q, d, g, gamma, child_rng(17, *seed_key), emb,
                          n=n_cand)
        out = res.tokens
        changed = np.nonzero(out != s)[0]
        budget = 0 if gamma == 0.0 else max(1, int(gamma * m + 0.5))
        ok = (
            len(out) == m
            and len(changed) <= budget
            and sorted(res.changed_positions) == list(changed)
            and np.array_equal(res2.tokens, out)  # fixed seed, fixed output
            and (gamma > 0.0 or np.array_equal(out, s))
        )
        for i in changed:
            cands = AG.candidate_set(q[i], s[i], n_cand)
            ok = ok and int(out[i]) in cands.token_ids.tolist()
            ok = ok and out[i] != s[i]
            ok = ok and int(s[i]) not in (D.PAD_ID, D.BOS_ID, D.EOS_ID)
        cases += 1
        passed += ok
    _report(3, passed == cases,
            f"{passed}/{cases} contract cases hold (length, budget, "
            f"candidate membership, special exclusion, determinism)")


# ---------------------------------------------------------------------------
# 4. Attention-weighted target positions vs hand-computed values.
# ---------------------------------------------------------------------------


def test_criterion_04_target_positions_hand_cases():
    col = lambda *rows: np.array(rows, dtype=np.float64)
    # (attention matrix [src x trg], x, x', special_mask, expected)
    cases = [
        # the 2x2 reference example: delta = (1, 0)
        (col([0.9, 0.1], [0.1, 0.9]), [5, 6], [7, 6], None, [0.9, 0.1]),
        # nothing changed -> uniform fallback
        (col([0.9, 0.1], [0.1, 0.9]), [5, 6], [5, 6], None, [0.5, 0.5]),
        # delta = (0, 1): second source row drives the weights
        (col([0.9, 0.1], [0.1, 0.9]), [5, 6], [5, 9], None, [0.1, 0.9]),
        # both changed: column sums (1, 1) -> uniform by coincidence
        (col([0.9, 0.1], [0.1, 0.9]), [5, 6], [7, 9], None, [0.5, 0.5]),
        # 3 sources, 2 targets, delta (1, 0, 1): weights (0.7, 0.7)
        (col([0.5, 0.2], [0.3, 0.3], [0.2, 0.5]), [4, 5, 6], [9, 5, 8],
         None, [0.5, 0.5]),
        # same matrix, delta (1, 0, 0): weights (0.5, 0.2) -> (5/7, 2/7)
        (col([0.5, 0.2], [0.3, 0.3], [0.2, 0.5]), [4, 5, 6], [9, 5, 6],
         None, [5 / 7, 2 / 7]),
        # 2 sources, 3 targets, delta (1, 0)
        (col([0.6, 0.3, 0.1], [0.4, 0.7, 0.9]), [4, 5], [8, 5],
         None, [0.6, 0.3, 0.1]),
        # special mask zeroes the BOS column; renormalize (0.3, 0.1)
        (col([0.6, 0.3, 0.1], [0.4, 0.7, 0.9]), [4, 5], [8, 5],
         [True, False, False], [0.0, 0.75, 0.25]),
        # mask + no change -> uniform over unmasked columns
        (col([0.6, 0.3, 0.1], [0.4, 0.7, 0.9]), [4, 5], [4, 5],
         [True, False, False], [0.0, 0.5, 0.5]),
        # changed row carries zero attention -> transported mass is zero
        # -> uniform fallback
        (col([0.0, 0.0], [1.0, 1.0]), [4, 5], [9, 5], None, [0.5, 0.5]),
        # 3x3 identity-ish attention, delta (0, 1, 1)
        (col([0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]),
         [4, 5, 6], [4, 9, 8], None, [0.2 / 2.0, 0.9 / 2.0, 0.9 / 2.0]),
    ]
    worst = 0.0
    for attn, x, xp, mask, want in cases:
        got = AG.target_position_distribution(attn, x, xp, special_mask=mask)
        worst = max(worst, float(np.abs(got - np.array(want)).max()))
    # fallback fires exactly when x' == x (and only then, given mass > 0)
    m = np.array([[0.9, 0.1], [0.1, 0.9]])
    unchanged = AG.target_position_distribution(m, [5, 6], [5, 6])
    changed = AG.target_position_distribution(m, [5, 6], [7, 6])
    fallback_ok = (np.array_equal(unchanged, [0.5, 0.5])
                   and not np.allclose(changed, [0.5, 0.5]))
    ok = worst <= 1e-6 and fallback_ok
    _report(4, ok, f"{len(cases)} hand-computed matrices, max abs err "
                   f"{worst:.2e} (tol 1e-6); uniform fallback iff unchanged")


# ---------------------------------------------------------------------------
# 5. Degeneracy identity and objective recomposition.
# ---------------------------------------------------------------------------


def _small_state(gamma_src, gamma_trg, seed=5):
    mt_cfg = TransformerConfig(src_vocab_size=40, trg_vocab_size=40,
                               num_layers=1, model_dim=16, num_heads=2,
                               ff_dim=32, max_len=16, dropout_rate=0.1,
                               dtype="float64")
    tc = T.TrainConfig(adv=AG.AdvConfig(gamma_src=gamma_src,
                                        gamma_trg=gamma_trg,
                                        n_candidates=5),
                       batch_tokens=256, warmup=10)
    return T.TrainState.create(mt_cfg, tc, seed=seed), tc


def _toy_pairs(n=8, seed=3):
    rng = child_rng(seed, "pairs")
    pairs = []
    for _ in range(n):
        nx = int(rng.integers(3, 8))
        ny = int(rng.integers(3, 8))
        x = rng.integers(4, 40, size=nx).astype(np.int64)
        y = np.concatenate([rng.integers(4, 40, size=ny),
                            [D.EOS_ID]]).astype(np.int64)
        pairs.append(D.make_pair(x, y))
    return pairs


def test_criterion_05_degeneracy_and_recomposition():
    state, tc = _small_state(0.0, 0.0)
    pairs = _toy_pairs()
    exact = True
    for pair in pairs:
        loss, _ = T.robustness_loss(pair, state, tc.adv, child_rng(0, "z"))
        clean = state.mt.translation_loss(pair.x, pair.z, pair.y)
        exact = exact and loss.data == clean.data  # bit-exact, no tolerance

    state, tc = _small_state(0.25, 0.5)
    batch = D.pad_batch(pairs)
    total, _ = T.total_loss(batch, state, tc, step=4)
    clean = float(state.mt.translation_loss(batch.x, batch.z, batch.y).data)
    x_mat, z_mat, _ = T.adversarial_batch(batch, state, tc.adv, step=4)
    robust = float(state.mt.translation_loss(x_mat, z_mat, batch.y).data)
    lm_x = float(state.bilm_x.lm_loss(batch.x).data)
    lm_y = float(state.bilm_y.lm_loss(batch.z).data)
    gap = abs(float(total.data) - (clean + robust + lm_x + lm_y))
    ok = exact and gap <= 1e-6
    _report(5, ok, f"zero-ratio identity bit-exact over {len(pairs)} pairs; "
                   f"objective vs independent term sum |diff| {gap:.2e} "
                   f"(tol 1e-6)")


# ---------------------------------------------------------------------------
# 6. Bidirectional-LM leak test: the masked token never influences its own
#    position's distribution.
# ---------------------------------------------------------------------------


def test_criterion_06_lm_leak():
    lm = BiLm(BiLmConfig(vocab_size=40, num_layers=1, model_dim=16,
                         num_heads=2, ff_dim=32, max_len=16), seed=21)
    rng = child_rng(0, "leak")
    trials, exact = 500, 0
    for _ in range(500):
        m = int(rng.integers(2, 13))
        s = rng.integers(4, 40, size=m).astype(np.int64)
        i = int(rng.integers(0, m))
        sub = int(rng.integers(4, 40))
        s2 = s.copy()
        s2[i] = sub
        a = lm.position_distributions(s)[i]
        b = lm.position_distributions(s2)[i]
        exact += np.array_equal(a, b)  # bit-exact, no tolerance
    ok = exact == trials
    _report(6, ok, f"{exact}/{trials} masked-position distributions "
                   f"bit-identical under substitution")


# ---------------------------------------------------------------------------
# 8. All six switch rows and the 4x4 gamma grid run end-to-end; the
#    clean-only row reproduces a plain baseline trace bit-exactly.
# ---------------------------------------------------------------------------


def test_criterion_08_ablation_reachability():
    task = D.make_toy_task("cipher_swap", vocab_size=30, corpus_size=60,
                           len_range=(3, 6), seed=2)
    train_pairs, val_pairs = task.pairs[:48], task.pairs[48:]
    mt_cfg = TransformerConfig(src_vocab_size=len(task.src_vocab),
                               trg_vocab_size=len(task.trg_vocab),
                               num_layers=1, model_dim=16, num_heads=2,
                               ff_dim=32, max_len=16)
    base = T.TrainConfig(adv=AG.AdvConfig(gamma_src=0.25, gamma_trg=0.25,
                                          n_candidates=5),
                         max_steps=3, batch_tokens=128, warmup=10)
    rows = E.ablation_run(train_pairs, val_pairs, mt_cfg, base, seed=6)
    grid = E.gamma_grid(train_pairs, val_pairs, mt_cfg, base,
                        src_gammas=[0.0, 0.1, 0.25, 0.5],
                        trg_gammas=[0.0, 0.1, 0.25, 0.5], seed=6)
    rows_ok = [r["label"] for r in rows] == [lbl for lbl, _ in E.SWITCH_ROWS]
    grid_ok = (len(grid) == 4 and all(len(row) == 4 for row in grid)
               and all(np.isfinite(v) for row in grid for v in row))

    # clean-only trainer trace vs a plain baseline loop, bit for bit
    seed, steps = 6, 5
    cfg = dataclasses.replace(base, max_steps=steps,
                              **dict(E.SWITCH_ROWS[0][1]))
    state = T.TrainState.create(mt_cfg, cfg, seed=seed)
    records = T.train(train_pairs, state, cfg)

    model = Transformer(mt_cfg, seed=seed)
    opt = Adam(model.params.tensors(), mt_cfg.model_dim,
               lr_scale=cfg.lr_scale, warmup=cfg.warmup, betas=cfg.betas,
               eps=cfg.eps)
    losses = []
    step = epoch = 0
    while step < steps:
        for batch in D.batch_iter(train_pairs, cfg.batch_tokens,
                                  shuffle_seed=seed + 7919 * epoch):
            if step >= steps:
                break
            step += 1
            opt.zero_grad()
            with GradTape() as tape:
                loss = model.translation_loss(
                    batch.x, batch.z, batch.y,
                    drop_rng=child_rng(seed, "dropout", step, "clean"))
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        epoch += 1
    trace_ok = [r["L_clean"] for r in records] == losses
    params_ok = all(np.array_equal(t.data, model.params[n].data)
                    for n, t in state.mt.params.items())
    ok = rows_ok and grid_ok and trace_ok and params_ok
    _report(8, ok, f"6 switch rows + 4x4 grid ran; clean-only trace vs "
                   f"plain baseline: losses equal={trace_ok}, "
                   f"parameters bit-equal={params_ok}")


# ---------------------------------------------------------------------------
# 9. BLEU identity, hand value, permutation invariance.
# ---------------------------------------------------------------------------


def test_criterion_09_bleu():
    corpus = [["the", "cat", "sat"], ["on", "a", "mat", "today"]]
    identity = E.bleu(corpus, corpus)
    # clipped-precision hand case: p1 = 5/6, p2 = 3/5 at max_n = 2;
    # 100 * sqrt(0.5) = 70.7107 (both lengths 6, no brevity penalty)
    hand = E.bleu([["the", "cat", "sat", "on", "the", "mat"]],
                  [["the", "cat", "is", "on", "the", "mat"]], max_n=2)
    zero = E.bleu([["a", "a", "a", "a"]], [["a", "b"]])
    rng = child_rng(0, "perm")
    hyps = [[str(t) for t in rng.integers(0, 9, size=rng.integers(2, 9))]
            for _ in range(20)]
    refs = [[str(t) for t in rng.integers(0, 9, size=rng.integers(2, 9))]
            for _ in range(20)]
    order = rng.permutation(20)
    perm_ok = (E.bleu([hyps[i] for i in order], [refs[i] for i in order])
               == E.bleu(hyps, refs))
    ok = (identity == 100.0 and round(hand, 2) == 70.71 and zero == 0.0
          and perm_ok)
    _report(9, ok, f"identity {identity:.2f} (= 100.00), hand case "
                   f"{hand:.2f} (= 70.71), zero-overlap {zero:.2f} (= 0.00), "
                   f"permutation-invariant={perm_ok}")


# ---------------------------------------------------------------------------
# 10. Perturbation overhead: construction wall-time per step under 3x the
#     clean-only baseline step, measured on the default toy configuration.
# ---------------------------------------------------------------------------


def test_criterion_10_overhead():
    task = D.make_toy_task("cipher_swap", vocab_size=200, corpus_size=600,
                           seed=0)
    mt_cfg = TransformerConfig(src_vocab_size=len(task.src_vocab),
                               trg_vocab_size=len(task.trg_vocab),
                               num_layers=2, model_dim=64, num_heads=4,
                               ff_dim=128, max_len=64)
    steps, skip = 8, 2
    cfg = T.TrainConfig(max_steps=steps, batch_tokens=512, warmup=400,
                        enable_robust=False, enable_lm=False)
    state = T.TrainState.create(mt_cfg, cfg, seed=0)
    recs = T.train(task.pairs, state, cfg)
    baseline = float(np.median([r["step_seconds"] for r in recs[skip:]]))

    cfg = T.TrainConfig(max_steps=steps, batch_tokens=512, warmup=400)
    state = T.TrainState.create(mt_cfg, cfg, seed=0)
    recs = T.train(task.pairs, state, cfg)
    reported = all("advgen_seconds" in r for r in recs)
    advgen = float(np.median([r["advgen_seconds"] for r in recs[skip:]]))

    ratio = advgen / baseline
    ok = reported and ratio < 3.0
    _report(10, ok, f"advgen {advgen * 1e3:.1f} ms/step vs baseline step "
                    f"{baseline * 1e3:.1f} ms -> ratio {ratio:.2f} "
                    f"(< 3.0), logged per step={reported}")


# ---------------------------------------------------------------------------
# 7. Paired toy robustness experiment (runs last: several minutes).
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_toy_robustness():
    t0 = time.time()
    task = D.make_toy_task("cipher_swap", vocab_size=200, corpus_size=5000,
                           seed=0)
    train_pairs, val_pairs = task.pairs[:4500], task.pairs[4500:]
    mt_cfg = TransformerConfig(src_vocab_size=len(task.src_vocab),
                               trg_vocab_size=len(task.trg_vocab),
                               num_layers=2, model_dim=64, num_heads=4,
                               ff_dim=128, max_len=32)
    noise_lm = BiLm(BiLmConfig(vocab_size=len(task.src_vocab), num_layers=2,
                               model_dim=64, num_heads=4, ff_dim=128,
                               max_len=32), seed=99)
    noise_lm.pretrain([p.x for p in train_pairs], steps=300, seed=99,
                      batch_size=64, warmup=100)

    fractions = [0.0, 0.1, 0.2]
    seeds = [1, 2, 3, 4, 5]
    clean_deficits, gains, zero_stab_ok = [], [], True
    for s in seeds:
        spec = E.NoiseSpec(fraction=0.1, k=100, pool_size=10, seed=s)
        cfg = T.TrainConfig(max_steps=900, batch_tokens=1024, warmup=100,
                            enable_robust=False, enable_lm=False)
        state = T.TrainState.create(mt_cfg, cfg, seed=s)
        T.train(train_pairs, state, cfg)
        clean = E.robustness_curve(state.mt, val_pairs, fractions, spec,
                                   noise_lm)

        cfg = T.TrainConfig(adv=AG.AdvConfig(gamma_src=0.25, gamma_trg=0.25),
                            max_steps=1400, batch_tokens=1024, warmup=100)
        state = T.TrainState.create(mt_cfg, cfg, seed=s)
        T.train(train_pairs, state, cfg)
        robust = E.robustness_curve(state.mt, val_pairs, fractions, spec,
                                    noise_lm)

        clean_deficits.append(robust.bleu_vs_ref[0] - clean.bleu_vs_ref[0])
        gains.append((robust.bleu_vs_ref[1] - clean.bleu_vs_ref[1],
                      robust.bleu_vs_ref[2] - clean.bleu_vs_ref[2]))
        zero_stab_ok = (zero_stab_ok and clean.stability[0] == 100.0
                        and robust.stability[0] == 100.0)

    took = time.time() - t0
    a_ok = all(d >= -0.5 for d in clean_deficits)
    wins = sum(g1 >= 1.0 and g2 >= 1.0 for g1, g2 in gains)
    b_ok = wins >= 4
    ok = a_ok and b_ok and zero_stab_ok and took <= 1800.0
    _report(7, ok,
            f"clean-BLEU deltas {['%+.2f' % d for d in clean_deficits]} "
            f"(each >= -0.5); noise gains (0.1, 0.2) "
            f"{[('%+.2f' % a, '%+.2f' % b) for a, b in gains]} -> "
            f"{wins}/5 seed pairs >= +1.0 at both fractions (need 4); "
            f"zero-noise stability 100.0 for all: {zero_stab_ok}; "
            f"{took / 60:.1f} min (limit 30)")
