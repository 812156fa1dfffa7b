"""Gradient-guided adversarial word substitution.

Given a sentence, a per-position vocabulary likelihood Q, a distribution over
positions, and per-position loss gradients w.r.t. the input embeddings, the
generator samples a budgeted set of positions and swaps each sampled word for
the candidate whose embedding displacement best aligns (cosine) with the loss
gradient — the attack direction that locally increases the loss most.

Everything here is pure given (inputs, rng): no parameters are touched and no
gradients flow through the construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .autodiff import Tensor, untracked
from .errors import ConfigError, ContractError, ShapeError

SPECIAL_IDS = (0, 1, 2)  # pad, bos, eos


@dataclass
class AdvConfig:
    gamma_src: float = 0.25
    gamma_trg: float = 0.50
    n_candidates: int = 10
    lam: float = 0.5  # weight of the LM term in the target likelihood mixture
    seed: int = 0
    excluded_ids: tuple = SPECIAL_IDS

    def __post_init__(self):
        if not 0.0 <= self.gamma_src <= 1.0:
            raise ConfigError(f"gamma_src {self.gamma_src} outside [0, 1]")
        if not 0.0 <= self.gamma_trg <= 1.0:
            raise ConfigError(f"gamma_trg {self.gamma_trg} outside [0, 1]")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam {self.lam} outside [0, 1]")


@dataclass
class CandidateSet:
    """Replacement candidates for one position, best-likelihood first."""

    position: int
    token_ids: np.ndarray

    def __len__(self):
        return len(self.token_ids)


@dataclass
class AdvResult:
    tokens: np.ndarray
    changed_positions: list[int] = field(default_factory=list)
    status: str = "ok"  # "ok" | "no_positions"


def _emb_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, Tensor):
        return embeddings.data
    return np.asarray(embeddings)


def candidate_set(q, s_i: int, n: int, excluded_ids=SPECIAL_IDS,
                  position: int = 0) -> CandidateSet:
    """Top-n tokens of likelihood q, with the original word and the special
    ids then removed (ties broken toward the lower token id)."""
    q = np.asarray(q)
    if n < 1:
        raise ContractError("candidate count must be >= 1")
    order = np.argsort(-q, kind="stable")[:n]
    drop = set(excluded_ids) | {int(s_i)}
    keep = np.array([t for t in order if int(t) not in drop], dtype=np.int64)
    return CandidateSet(position=position, token_ids=keep)


def select_adversarial_word(cands: CandidateSet, e_orig, g, embeddings):
    """Candidate maximizing cosine(e(c) - e_orig, g), or None.

    None signals "keep the original word": the candidate set is empty, the
    gradient is zero (no direction to follow), or every candidate coincides
    with the original embedding. Ties break toward the lower token id.
    """
    ids = np.asarray(cands.token_ids, dtype=np.int64)
    if ids.size == 0:
        return None
    g = np.asarray(g, dtype=np.float64)
    gn = np.linalg.norm(g)
    if gn == 0.0 or not np.isfinite(gn):
        return None
    emb = _emb_matrix(embeddings)
    diffs = emb[ids].astype(np.float64) - np.asarray(e_orig, dtype=np.float64)
    norms = np.linalg.norm(diffs, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (diffs @ g) / (norms * gn)
    sims[(norms == 0.0) | ~np.isfinite(sims)] = -np.inf
    best = sims.max()
    if best == -np.inf:
        return None
    return int(ids[sims == best].min())


def adv_gen(s, q_rows, d_pos, grads, gamma: float, rng: np.random.Generator,
            embeddings, n: int = 10, excluded_ids=SPECIAL_IDS) -> AdvResult:
    """Budgeted adversarial rewrite of sentence ``s``.

    ``q_rows`` is an (|s|, V) array of per-position likelihoods or a callable
    i -> (V,); ``d_pos`` the position-sampling distribution; ``grads`` one
    loss gradient per position. Samples round(gamma*|s|) distinct non-special
    positions (at least one when gamma > 0 and any position is eligible)
    without replacement, proportional to ``d_pos``.
    """
    s = np.asarray(s, dtype=np.int64)
    m = len(s)
    d_pos = np.asarray(d_pos, dtype=np.float64)
    if d_pos.shape != (m,):
        raise ShapeError(f"position distribution shape {d_pos.shape} vs sentence {m}")
    if (d_pos < 0).any():
        raise ContractError("position distribution has negative mass")
    grads = np.asarray(grads)
    if grads.ndim != 2 or grads.shape[0] != m:
        raise ShapeError(f"need one gradient per position, got {grads.shape}")

    out = s.copy()
    if gamma == 0.0:
        return AdvResult(out)

    special = np.isin(s, np.asarray(excluded_ids, dtype=np.int64))
    p = np.where(special, 0.0, d_pos)
    total = p.sum()
    if total == 0.0:
        return AdvResult(out, status="no_positions")
    p = p / total

    budget = max(1, int(gamma * m + 0.5))
    budget = min(budget, int(np.count_nonzero(p)))
    positions = rng.choice(m, size=budget, replace=False, p=p)

    emb = _emb_matrix(embeddings)
    changed: list[int] = []
    for i in sorted(int(j) for j in positions):
        qi = q_rows(i) if callable(q_rows) else q_rows[i]
        cands = candidate_set(qi, s[i], n, excluded_ids, position=i)
        pick = select_adversarial_word(cands, emb[s[i]], grads[i], emb)
        if pick is not None and pick != s[i]:
            out[i] = pick
            changed.append(i)
    return AdvResult(out, changed)


# ---------------------------------------------------------------------------
# Likelihoods and position distributions
# ---------------------------------------------------------------------------


def q_src(s, bilm) -> np.ndarray:
    """(|s|, V) source likelihoods: the bidirectional LM at every position."""
    return bilm.position_distributions(np.asarray(s, dtype=np.int64))


def mix_target_likelihoods(lm_rows, mt_rows, lam: float) -> np.ndarray:
    """lam * LM + (1 - lam) * MT next-token rows, shifted one step.

    Row i >= 1 mixes the bidirectional target LM with the translation
    model's prediction from decoder prefix z_{<i} (= MT row i-1). Row 0 is
    the BOS slot; it has no MT prediction, so it stays the LM row (BOS is a
    special position and is never sampled for replacement).
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lam {lam} outside [0, 1]")
    q = lm_rows.copy()
    if q.shape[0] > 1:
        q[1:] = lam * lm_rows[1:] + (1.0 - lam) * mt_rows[:-1].astype(lm_rows.dtype)
    return q


def q_trg_with_attention(z, x_prime, bilm_y, mt_model, lam: float):
    """Target likelihoods plus the cross-attention of the same forward pass.

    Returns (q, attn) with q of shape (|z|, V) and attn of shape (|x'|, |z|).
    """
    z = np.asarray(z, dtype=np.int64)
    x_prime = np.asarray(x_prime, dtype=np.int64)
    lm_rows = bilm_y.position_distributions(z)
    with untracked():
        h = mt_model.encode(x_prime)
        logits, attn = mt_model.decode(z, h)
    mt_rows = K.softmax_fwd(np.ascontiguousarray(logits.data))
    return mix_target_likelihoods(lm_rows, mt_rows, lam), attn


def q_trg(z, x_prime, bilm_y, mt_model, lam: float) -> np.ndarray:
    q, _ = q_trg_with_attention(z, x_prime, bilm_y, mt_model, lam)
    return q


def source_position_distribution(x, excluded_ids=SPECIAL_IDS) -> np.ndarray:
    """Uniform over the non-special source positions."""
    x = np.asarray(x, dtype=np.int64)
    mass = (~np.isin(x, np.asarray(excluded_ids, dtype=np.int64))).astype(np.float64)
    total = mass.sum()
    return mass / total if total > 0 else mass


def target_position_distribution(attn, x, x_prime, special_mask=None) -> np.ndarray:
    """Position distribution over target steps, weighted by how much each
    step attends to the changed source positions.

    P(j) = sum_i M_ij [x_i != x'_i], normalized. When nothing changed (or the
    changed positions carry no attention mass), falls back to uniform over
    the eligible target positions; ``special_mask`` (bool per target step)
    marks steps that must receive zero mass.
    """
    m = np.asarray(getattr(attn, "matrix", attn), dtype=np.float64)
    x = np.asarray(x, dtype=np.int64)
    x_prime = np.asarray(x_prime, dtype=np.int64)
    if x.shape != x_prime.shape:
        raise ContractError(f"source shapes differ: {x.shape} vs {x_prime.shape}")
    if m.ndim != 2 or m.shape[0] != len(x):
        raise ShapeError(f"attention {m.shape} does not match source length {len(x)}")
    delta = (x != x_prime).astype(np.float64)
    weights = delta @ m
    if special_mask is not None:
        special_mask = np.asarray(special_mask, dtype=bool)
        if special_mask.shape != weights.shape:
            raise ShapeError("special mask does not match target length")
        weights = np.where(special_mask, 0.0, weights)
    total = weights.sum()
    if total > 0.0:
        return weights / total
    fallback = np.ones(m.shape[1], dtype=np.float64)
    if special_mask is not None:
        fallback = np.where(special_mask, 0.0, fallback)
    total = fallback.sum()
    return fallback / total if total > 0 else fallback
