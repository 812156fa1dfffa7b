"""Bidirectional language model: position-wise token likelihoods.

Two causal transformer stacks run over the sentence — one left-to-right over
``[BOS] + s[:-1]``, one left-to-right over the reversed sentence
``[EOS] + reversed(s)[:-1]`` — and a linear layer combines, for each
position i, the forward state that saw exactly ``s_{<i}`` with the backward
state that saw exactly ``s_{>i}``. The token at position i itself never
enters either input, so the predicted distribution at i cannot leak it;
that isolation is bit-exact because the stacks are causally masked with
additive -inf.

The embedding table can be adopted from a translation model so the two are
trained jointly on one set of word vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import autodiff as ad
from . import layers as L
from .autodiff import GradTape, Tensor, untracked
from .errors import ConfigError, ContractError, DataError, SequenceLengthError
from .optim import Adam
from .params import ParamSet, embedding_init
from .seeding import child_rng
from .transformer import sinusoid_table


@dataclass
class BiLmConfig:
    vocab_size: int
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab size must cover the four reserved ids")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class BiLm:
    """The bidirectional LM: parameters plus scoring/training methods."""

    def __init__(self, config: BiLmConfig, seed: int = 0, embed: Tensor | None = None):
        self.config = config
        dt = config.np_dtype
        rng = child_rng(seed, "init", "bilm")
        ps = ParamSet()
        if embed is None:
            ps.add("embed", embedding_init(rng, config.vocab_size, config.model_dim, dt))
        else:
            if embed.shape != (config.vocab_size, config.model_dim):
                raise ConfigError(
                    f"adopted embedding shape {embed.shape} does not match "
                    f"({config.vocab_size}, {config.model_dim})"
                )
            ps.adopt("embed", embed)
        D, F = config.model_dim, config.ff_dim
        for stack in ("fwd", "bwd"):
            for i in range(config.num_layers):
                nm = f"{stack}{i}"
                ps.add_layer_norm(f"{nm}.ln1", D, dt)
                for proj in ("q", "k", "v", "o"):
                    ps.add_linear(rng, f"{nm}.attn.{proj}", D, D, dt)
                ps.add_layer_norm(f"{nm}.ln2", D, dt)
                ps.add_linear(rng, f"{nm}.ff1", D, F, dt)
                ps.add_linear(rng, f"{nm}.ff2", F, D, dt)
            ps.add_layer_norm(f"{stack}_final_ln", D, dt)
        ps.add_linear(rng, "combine", 2 * D, D, dt)
        ps.add_linear(rng, "out", D, config.vocab_size, dt)
        self.params = ps
        self._pe = sinusoid_table(config.max_len, D, dt)

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]

    def parameters(self) -> list[Tensor]:
        return self.params.tensors()

    # ------------------------------------------------------------------
    # Forward pieces
    # ------------------------------------------------------------------

    def _stack(self, prefix: str, ids: np.ndarray, drop_rng) -> Tensor:
        """Causally masked transformer over ``ids``; returns (B, T, D)."""
        cfg = self.config
        ps, rate = self.params, cfg.dropout_rate
        T = ids.shape[1]
        emb = ad.gather_rows(self.embed, ids)
        x = ad.scale(emb, math.sqrt(cfg.model_dim))
        x = ad.add(x, Tensor(self._pe[:T], dtype=emb.dtype))
        x = L.maybe_dropout(x, rate, drop_rng)
        bias = L.causal_bias(ids, cfg.pad_id, cfg.num_heads, cfg.np_dtype)
        for i in range(cfg.num_layers):
            nm = f"{prefix}{i}"
            a = L.lnorm(ps, f"{nm}.ln1", x)
            x = ad.add(x, L.mha(ps, f"{nm}.attn", a, a, cfg.num_heads, bias, rate, drop_rng))
            x = ad.add(x, L.ffn(ps, nm, L.lnorm(ps, f"{nm}.ln2", x), rate, drop_rng))
        return L.lnorm(ps, f"{prefix}_final_ln", x)

    def _logits(self, s2d: np.ndarray, drop_rng) -> Tensor:
        """(B, T, V) logits; position i conditions on s_{<i} and s_{>i} only."""
        cfg = self.config
        B, T = s2d.shape
        if T == 0:
            raise ContractError("empty sentence")
        if T > cfg.max_len:
            raise SequenceLengthError(f"sentence length {T} exceeds max_len {cfg.max_len}")
        lengths = (s2d != cfg.pad_id).sum(axis=1)
        if (lengths == 0).any():
            raise ContractError("a sentence is all padding")

        f_in = np.full_like(s2d, cfg.pad_id)
        f_in[:, 0] = cfg.bos_id
        f_in[:, 1:] = s2d[:, :-1]

        # Per-row reversal of the real tokens (pads stay trailing).
        offsets = lengths[:, None] - 1 - np.arange(T)[None, :]
        rev = np.where(
            offsets >= 0,
            np.take_along_axis(s2d, np.clip(offsets, 0, T - 1), axis=1),
            cfg.pad_id,
        )
        r_in = np.full_like(s2d, cfg.pad_id)
        r_in[:, 0] = cfg.eos_id
        r_in[:, 1:] = rev[:, :-1]

        h_f = self._stack("fwd", f_in, drop_rng)
        h_r = self._stack("bwd", r_in, drop_rng)

        # Align the backward stack: position i pairs with the reversed-run
        # state that saw exactly s_{>i}, i.e. row (length-1-i) of its sentence.
        back = np.clip(offsets, 0, T - 1)
        gidx = np.arange(B)[:, None] * T + back
        flat = ad.reshape(h_r, (B * T, cfg.model_dim))
        aligned = ad.gather_rows(flat, gidx)

        combined = L.linear(self.params, "combine", ad.concat([h_f, aligned], axis=-1))
        return L.linear(self.params, "out", combined)

    # ------------------------------------------------------------------
    # Scoring
    # ------------------------------------------------------------------

    def position_distributions(self, s) -> np.ndarray:
        """(|s|, V) array; row i is P(token | s_{<i}, s_{>i})."""
        arr = np.asarray(s, dtype=np.int64)
        if arr.ndim != 1:
            raise ContractError(f"expected one sentence (1-D ids), got shape {arr.shape}")
        with untracked():
            lg = self._logits(arr[None, :], None)
        return K.softmax_fwd(np.ascontiguousarray(lg.data[0]))

    def position_distributions_batch(self, s2d) -> np.ndarray:
        """(B, T, V) likelihoods for a padded batch in one forward pass.

        Rows at padded positions are filler; callers slice each sentence to
        its real length.
        """
        arr = np.asarray(s2d, dtype=np.int64)
        if arr.ndim != 2:
            raise ContractError(f"expected a padded batch (2-D ids), got shape {arr.shape}")
        with untracked():
            lg = self._logits(arr, None)
        B, T, V = lg.data.shape
        flat = K.softmax_fwd(np.ascontiguousarray(lg.data.reshape(B * T, V)))
        return flat.reshape(B, T, V)

    def position_distribution(self, s, i: int) -> np.ndarray:
        arr = np.asarray(s, dtype=np.int64)
        if not 0 <= i < arr.shape[-1]:
            raise ContractError(f"position {i} out of range for length {arr.shape[-1]}")
        return self.position_distributions(arr)[i]

    def lm_loss(self, sentences, drop_rng=None) -> Tensor:
        """Mean over non-pad positions of -log P(s_i | both contexts)."""
        s2d, _ = L.as_batch(sentences, "sentences")
        if s2d.shape[0] == 0:
            raise ContractError("empty batch")
        logits = self._logits(s2d, drop_rng)
        return ad.cross_entropy(logits, s2d, self.config.pad_id)

    def sentence_scores(self, sentences) -> np.ndarray:
        """Mean log-probability per sentence, (B,) for a padded batch."""
        s2d, single = L.as_batch(sentences, "sentences")
        with untracked():
            lg = self._logits(s2d, None).data
        m = lg.max(axis=-1, keepdims=True)
        lp = lg - m - np.log(np.exp(lg - m).sum(axis=-1, keepdims=True))
        B, T = s2d.shape
        tok_lp = lp[np.arange(B)[:, None], np.arange(T)[None, :], s2d]
        mask = s2d != self.config.pad_id
        scores = (tok_lp * mask).sum(axis=1) / mask.sum(axis=1)
        return scores[0] if single else scores

    def sentence_score(self, s) -> float:
        return float(self.sentence_scores(np.asarray(s, dtype=np.int64)))

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def pretrain(self, corpus, steps: int, seed: int = 0, lr_scale: float = 1.0,
                 warmup: int = 100, batch_size: int = 32) -> list[float]:
        """Optimize the LM on a monolingual corpus; returns per-step losses."""
        sents = [np.asarray(s, dtype=np.int64) for s in corpus]
        if not sents:
            raise DataError("pretraining corpus is empty")
        opt = Adam(self.parameters(), self.config.model_dim, lr_scale, warmup)
        pick_rng = child_rng(seed, "lm_batch")
        drop_rng = child_rng(seed, "lm_dropout")
        losses: list[float] = []
        for _ in range(steps):
            take = min(batch_size, len(sents))
            chosen = pick_rng.choice(len(sents), size=take, replace=False)
            width = max(len(sents[j]) for j in chosen)
            batch = np.full((take, width), self.config.pad_id, dtype=np.int64)
            for row, j in enumerate(chosen):
                batch[row, : len(sents[j])] = sents[j]
            opt.zero_grad()
            with GradTape() as tape:
                loss = self.lm_loss(batch, drop_rng=drop_rng)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        return losses
