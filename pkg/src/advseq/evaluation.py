"""BLEU scoring, embedding-neighbor noise, robustness and ablation reports."""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import training as T
from .errors import ConfigError, ContractError
from .seeding import child_rng


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _tokens(s):
    toks = s.split() if isinstance(s, str) else list(s)
    return [t.lower() if isinstance(t, str) else t for t in toks]


def _ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Case-insensitive corpus BLEU in [0, 100], unsmoothed.

    Geometric mean of modified n-gram precisions times the brevity penalty.
    Orders with no n-grams anywhere in the hypotheses are skipped; a zero
    match count at any remaining order gives 0. Empty hypotheses throughout
    score 0 by convention.
    """
    hyps = [_tokens(h) for h in hypotheses]
    refs = [_tokens(r) for r in references]
    if len(hyps) != len(refs):
        raise ContractError(
            f"hypothesis count {len(hyps)} != reference count {len(refs)}")
    if not hyps:
        raise ContractError("empty corpus")
    match = [0] * max_n
    guess = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hg = _ngrams(h, n)
            if not hg:
                continue
            rg = _ngrams(r, n)
            guess[n - 1] += sum(hg.values())
            match[n - 1] += sum(min(c, rg[g]) for g, c in hg.items())
    if hyp_len == 0:
        return 0.0
    logs = []
    for m, g in zip(match, guess):
        if g == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / g))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def sentence_bleu(hyp, ref, max_n: int = 4) -> float:
    """Single-sentence BLEU with add-one smoothing on orders >= 2 (debug aid)."""
    h, r = _tokens(hyp), _tokens(ref)
    if not h:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        hg = _ngrams(h, n)
        if not hg:
            continue
        rg = _ngrams(r, n)
        g = sum(hg.values())
        m = sum(min(c, rg[t]) for t, c in hg.items())
        if n >= 2:
            m += 1
            g += 1
        if m == 0:
            return 0.0
        logs.append(math.log(m / g))
    bp = 1.0 if len(h) > len(r) else math.exp(1.0 - len(r) / len(h))
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


# ---------------------------------------------------------------------------
# Embedding-neighbor noise
# ---------------------------------------------------------------------------

NOISE_EXCLUDED_IDS = (D.PAD_ID, D.BOS_ID, D.EOS_ID, D.UNK_ID)


@dataclass
class NoiseSpec:
    """How to corrupt evaluation inputs: replacement fraction, number of
    candidate corruptions per sentence, neighbor-pool size, seed."""

    fraction: float
    k: int = 100
    pool_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"noise fraction {self.fraction} outside [0, 1]")
        if self.k < 1:
            raise ConfigError(f"candidate count {self.k} must be >= 1")
        if self.pool_size < 1:
            raise ConfigError(f"pool size {self.pool_size} must be >= 1")


def neighbor_pools(embeddings, pool_size: int = 10,
                   excluded_ids=NOISE_EXCLUDED_IDS):
    """Per-token nearest neighbors by cosine, excluding self and specials.

    Returns a list of int arrays (possibly shorter than pool_size for tiny
    vocabularies; empty for zero-norm rows' neighbors of themselves only).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = emb / safe[:, None]
    sims = unit @ unit.T
    sims[:, list(excluded_ids)] = -np.inf
    sims[:, norms == 0.0] = -np.inf
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    pools = []
    for i in range(emb.shape[0]):
        row = order[i][np.isfinite(sims[i, order[i]])][:pool_size]
        pools.append(row.astype(np.int64))
    return pools


def noise_candidates(sentence, spec: NoiseSpec, embeddings, bilm,
                     rng=None, pools=None):
    """The k corrupted candidates and their language-model scores.

    Each candidate replaces round(fraction * |s|) distinct positions with a
    uniform draw from the original word's neighbor pool.
    """
    s = np.asarray(sentence, dtype=np.int64)
    budget = int(spec.fraction * len(s) + 0.5)
    if budget == 0:
        cands = [s.copy() for _ in range(spec.k)]
        return cands, bilm.sentence_scores(np.stack(cands))
    if rng is None:
        rng = child_rng(spec.seed, "noise")
    if pools is None:
        pools = neighbor_pools(embeddings, spec.pool_size)
    cands = []
    for _ in range(spec.k):
        c = s.copy()
        positions = rng.choice(len(s), size=budget, replace=False)
        for pos in positions:
            pool = pools[c[pos]]
            if len(pool):
                c[pos] = pool[rng.integers(len(pool))]
        cands.append(c)
    return cands, bilm.sentence_scores(np.stack(cands))


def make_noisy(sentence, spec: NoiseSpec, embeddings, bilm,
               rng=None, pools=None):
    """Best-scoring corruption of a sentence (unchanged at fraction 0)."""
    s = np.asarray(sentence, dtype=np.int64)
    if int(spec.fraction * len(s) + 0.5) == 0:
        return s.copy()
    cands, scores = noise_candidates(s, spec, embeddings, bilm, rng, pools)
    return cands[int(np.argmax(scores))].copy()


# ---------------------------------------------------------------------------
# Robustness curve
# ---------------------------------------------------------------------------


@dataclass
class RobustnessReport:
    """BLEU against references and against the model's own clean decodes
    (stability), per noise fraction."""

    fractions: list
    bleu_vs_ref: list
    stability: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "bleu", "stability"])
            for f, b, s in zip(self.fractions, self.bleu_vs_ref, self.stability):
                w.writerow([f, f"{b:.2f}", f"{s:.2f}"])


def _detok(ids, vocab):
    ids = [int(i) for i in ids]
    if vocab is None:
        return [str(i) for i in ids]
    return vocab.decode(ids)


def decode_corpus(model, inputs, max_steps=None):
    """Greedy decodes with special ids stripped (untrained models may emit
    them mid-stream; they are never scored).

    Equal-length inputs are decoded as one batch; outputs keep input order.
    """
    inputs = [np.asarray(x, dtype=np.int64) for x in inputs]
    by_len: dict = {}
    for idx, x in enumerate(inputs):
        by_len.setdefault(len(x), []).append(idx)
    outs: list = [None] * len(inputs)
    for indices in by_len.values():
        group = np.stack([inputs[i] for i in indices])
        decoded = model.greedy_decode(group, max_steps=max_steps)
        for i, ids in zip(indices, decoded):
            outs[i] = np.array([t for t in ids if t >= 4], dtype=np.int64)
    return outs


def robustness_curve(model, pairs, fractions, spec: NoiseSpec, bilm,
                     embeddings=None, trg_vocab=None) -> RobustnessReport:
    """Decode under increasing input noise; score accuracy and stability.

    Noise derives from `embeddings` (default: the scoring LM's own table)
    and the given language model, not from `model` — so several models can
    be compared on identically-generated corruptions.
    """
    if embeddings is None:
        embeddings = bilm.params["embed"].data
    pools = neighbor_pools(embeddings, spec.pool_size)
    refs = [_detok(p.y[:-1], trg_vocab) for p in pairs]
    clean_out = decode_corpus(model, [p.x for p in pairs])
    clean_toks = [_detok(o, trg_vocab) for o in clean_out]
    scores, stabilities = [], []
    for fi, f in enumerate(fractions):
        spec_f = dataclasses.replace(spec, fraction=f)
        noisy = [
            make_noisy(p.x, spec_f, embeddings, bilm,
                       rng=child_rng(spec.seed, "noise", fi, idx), pools=pools)
            for idx, p in enumerate(pairs)
        ]
        out = decode_corpus(model, noisy)
        toks = [_detok(o, trg_vocab) for o in out]
        scores.append(bleu(toks, refs))
        stabilities.append(bleu(toks, clean_toks))
    return RobustnessReport(list(fractions), scores, stabilities)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

SWITCH_ROWS = [
    ("clean", dict(enable_clean=True, enable_robust=False, enable_lm=False,
                   perturb_src=False, perturb_trg=False)),
    ("clean+lm", dict(enable_clean=True, enable_robust=False, enable_lm=True,
                      perturb_src=False, perturb_trg=False)),
    ("robust_src", dict(enable_clean=True, enable_robust=True, enable_lm=False,
                        perturb_src=True, perturb_trg=False)),
    ("robust_src_trg", dict(enable_clean=True, enable_robust=True,
                            enable_lm=False, perturb_src=True, perturb_trg=True)),
    ("robust_src+lm", dict(enable_clean=True, enable_robust=True, enable_lm=True,
                           perturb_src=True, perturb_trg=False)),
    ("full", dict(enable_clean=True, enable_robust=True, enable_lm=True,
                  perturb_src=True, perturb_trg=True)),
]

_CLEAN_SWITCHES = SWITCH_ROWS[0][1]


def _val_bleu(state, val_pairs, trg_vocab=None) -> float:
    out = decode_corpus(state.mt, [p.x for p in val_pairs])
    hyps = [_detok(o, trg_vocab) for o in out]
    refs = [_detok(p.y[:-1], trg_vocab) for p in val_pairs]
    return bleu(hyps, refs)


def ablation_run(train_pairs, val_pairs, mt_config, base_config,
                 rows=SWITCH_ROWS, seed: int = 0, trg_vocab=None):
    """Train one model per switch row under a shared seed; report BLEU."""
    results = []
    for label, switches in rows:
        tc = dataclasses.replace(base_config, **switches)
        state = T.TrainState.create(mt_config, tc, seed=seed)
        T.train(train_pairs, state, tc)
        results.append({"label": label, **switches,
                        "bleu": _val_bleu(state, val_pairs, trg_vocab)})
    return results


def gamma_grid(train_pairs, val_pairs, mt_config, base_config,
               src_gammas, trg_gammas, seed: int = 0, trg_vocab=None):
    """BLEU matrix over perturbation-ratio combinations.

    The (0, 0) cell runs the plain clean-loss configuration, so that corner
    is the clean baseline by construction.
    """
    out = np.zeros((len(src_gammas), len(trg_gammas)))
    for i, gs in enumerate(src_gammas):
        for j, gt in enumerate(trg_gammas):
            if gs == 0.0 and gt == 0.0:
                tc = dataclasses.replace(base_config, **_CLEAN_SWITCHES)
            else:
                adv = dataclasses.replace(base_config.adv,
                                          gamma_src=gs, gamma_trg=gt)
                tc = dataclasses.replace(base_config, adv=adv)
            state = T.TrainState.create(mt_config, tc, seed=seed)
            T.train(train_pairs, state, tc)
            out[i, j] = _val_bleu(state, val_pairs, trg_vocab)
    return out


def write_ablation_csv(results, path) -> None:
    if not results:
        raise ContractError("no ablation results to write")
    fields = list(results[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in results:
            w.writerow({k: (f"{v:.2f}" if isinstance(v, float) else v)
                        for k, v in row.items()})


def write_gamma_csv(src_gammas, trg_gammas, matrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma_src\\gamma_trg"] + [str(g) for g in trg_gammas])
        for i, gs in enumerate(src_gammas):
            w.writerow([str(gs)] + [f"{matrix[i, j]:.2f}"
                                    for j in range(len(trg_gammas))])
