"""Encoder-decoder translation model with extractable cross-attention.

A pre-norm transformer (sinusoidal positions, residual sublayers, final
layer norm per stack) sized for desk-scale experiments. Beyond the usual
loss/decode surface it exposes the three hooks the adversarial pipeline
needs:

* per-position gradients of the loss w.r.t. the input embedding vectors
  (``input_embedding_grads``),
* the head-averaged encoder-decoder attention matrix of a chosen decoder
  layer (``decode`` returns it; ``attention_map`` wraps it for one sentence),
* a loss entry point that takes embedding tensors directly
  (``loss_from_embeddings``), which is what makes finite-difference checks
  of the embedding gradients possible.

Masking is additive 0/-inf before the softmax, so causality and pad
isolation hold bit-exactly, not just approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import GradTape, Tensor, untracked
from .errors import ConfigError, ContractError, SequenceLengthError, ShapeError
from .params import ParamSet, embedding_init
from .seeding import child_rng


@dataclass
class TransformerConfig:
    src_vocab_size: int
    trg_vocab_size: int
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    # Decoder layer whose cross-attention feeds the attention map; negative
    # indices count from the end (default: last layer, heads averaged).
    attn_map_layer: int = -1
    dtype: str = "float32"

    def __post_init__(self):
        if self.src_vocab_size < 4 or self.trg_vocab_size < 4:
            raise ConfigError("vocab sizes must cover the four reserved ids")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not -self.num_layers <= self.attn_map_layer < self.num_layers:
            raise ConfigError(f"attn_map_layer {self.attn_map_layer} out of range")
        if np.dtype(self.dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class AttentionMap:
    """Cross-attention matrix for one sentence pair.

    ``matrix[i, j]`` is the attention weight between source position i and
    target step j; every target column is a distribution over the source.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ShapeError(f"attention map must be 2-D, got shape {m.shape}")
        if m.size and m.min() < 0:
            raise ContractError("attention map has negative entries")
        col_sums = m.sum(axis=0)
        if m.size and not np.allclose(col_sums, 1.0, atol=1e-5):
            raise ContractError("attention map columns do not sum to 1")
        self.matrix = m


def sinusoid_table(max_len: int, dim: int, dtype) -> np.ndarray:
    """Fixed sin/cos positional encodings, shape (max_len, dim)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


_as_batch = L.as_batch


class Transformer:
    """The translation model: parameters plus the forward-pass methods."""

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        dt = config.np_dtype
        rng = child_rng(seed, "init", "mt")
        ps = ParamSet()
        D, F = config.model_dim, config.ff_dim
        ps.add("src_embed", embedding_init(rng, config.src_vocab_size, D, dt))
        ps.add("trg_embed", embedding_init(rng, config.trg_vocab_size, D, dt))
        for i in range(config.num_layers):
            nm = f"enc{i}"
            ps.add_layer_norm(f"{nm}.ln1", D, dt)
            for proj in ("q", "k", "v", "o"):
                ps.add_linear(rng, f"{nm}.attn.{proj}", D, D, dt)
            ps.add_layer_norm(f"{nm}.ln2", D, dt)
            ps.add_linear(rng, f"{nm}.ff1", D, F, dt)
            ps.add_linear(rng, f"{nm}.ff2", F, D, dt)
        ps.add_layer_norm("enc_final_ln", D, dt)
        for i in range(config.num_layers):
            nm = f"dec{i}"
            ps.add_layer_norm(f"{nm}.ln1", D, dt)
            for proj in ("q", "k", "v", "o"):
                ps.add_linear(rng, f"{nm}.self_attn.{proj}", D, D, dt)
            ps.add_layer_norm(f"{nm}.ln2", D, dt)
            for proj in ("q", "k", "v", "o"):
                ps.add_linear(rng, f"{nm}.cross_attn.{proj}", D, D, dt)
            ps.add_layer_norm(f"{nm}.ln3", D, dt)
            ps.add_linear(rng, f"{nm}.ff1", D, F, dt)
            ps.add_linear(rng, f"{nm}.ff2", F, D, dt)
        ps.add_layer_norm("dec_final_ln", D, dt)
        ps.add_linear(rng, "out", D, config.trg_vocab_size, dt)
        self.params = ps
        self._pe = sinusoid_table(config.max_len, D, dt)

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    @property
    def src_embed(self) -> Tensor:
        return self.params["src_embed"]

    @property
    def trg_embed(self) -> Tensor:
        return self.params["trg_embed"]

    def parameters(self) -> list[Tensor]:
        return self.params.tensors()

    def _embed_from(self, emb: Tensor, drop_rng) -> Tensor:
        T = emb.shape[1]
        x = ad.scale(emb, math.sqrt(self.config.model_dim))
        x = ad.add(x, Tensor(self._pe[:T], dtype=emb.dtype))
        return L.maybe_dropout(x, self.config.dropout_rate, drop_rng)

    def _check_len(self, T: int, what: str) -> None:
        if T == 0:
            raise ContractError(f"{what} is empty")
        if T > self.config.max_len:
            raise SequenceLengthError(
                f"{what} length {T} exceeds max_len {self.config.max_len}"
            )

    # ------------------------------------------------------------------
    # Stacks
    # ------------------------------------------------------------------

    def _encode_from_emb(self, emb: Tensor, x_ids: np.ndarray, drop_rng) -> Tensor:
        cfg = self.config
        T = x_ids.shape[1]
        self._check_len(T, "source sentence")
        if (x_ids == cfg.pad_id).all(axis=1).any():
            raise ContractError("a source sentence is all padding")
        x = self._embed_from(emb, drop_rng)
        ps, rate = self.params, cfg.dropout_rate
        bias = L.key_pad_bias(x_ids, cfg.pad_id, cfg.num_heads, T, cfg.np_dtype)
        for i in range(cfg.num_layers):
            nm = f"enc{i}"
            a = L.lnorm(ps, f"{nm}.ln1", x)
            x = ad.add(x, L.mha(ps, f"{nm}.attn", a, a, cfg.num_heads, bias, rate, drop_rng))
            x = ad.add(x, L.ffn(ps, nm, L.lnorm(ps, f"{nm}.ln2", x), rate, drop_rng))
        return L.lnorm(ps, "enc_final_ln", x)

    def _decode_from_emb(self, emb, z_ids, h, x_ids, drop_rng):
        """Decoder stack. Returns (logits Tensor (B, Tz, V), cross-attention
        array (B, Tx, Tz) head-averaged from the configured layer)."""
        cfg = self.config
        B, Tz = z_ids.shape
        self._check_len(Tz, "target prefix")
        if h.shape[0] != B:
            raise ShapeError(f"encoder output batch {h.shape[0]} vs target batch {B}")
        x = self._embed_from(emb, drop_rng)
        ps, rate = self.params, cfg.dropout_rate
        self_bias = L.causal_bias(z_ids, cfg.pad_id, cfg.num_heads, cfg.np_dtype)
        cross_bias = None
        if x_ids is not None:
            cross_bias = L.key_pad_bias(x_ids, cfg.pad_id, cfg.num_heads, Tz, cfg.np_dtype)
        layer_idx = cfg.attn_map_layer % cfg.num_layers
        captured: list[np.ndarray] = []
        for i in range(cfg.num_layers):
            nm = f"dec{i}"
            a = L.lnorm(ps, f"{nm}.ln1", x)
            x = ad.add(x, L.mha(ps, f"{nm}.self_attn", a, a, cfg.num_heads, self_bias,
                                rate, drop_rng))
            q = L.lnorm(ps, f"{nm}.ln2", x)
            cap = captured if i == layer_idx else None
            x = ad.add(x, L.mha(ps, f"{nm}.cross_attn", q, h, cfg.num_heads, cross_bias,
                                rate, drop_rng, cap))
            x = ad.add(x, L.ffn(ps, nm, L.lnorm(ps, f"{nm}.ln3", x), rate, drop_rng))
        logits = L.linear(ps, "out", L.lnorm(ps, "dec_final_ln", x))
        # captured[0]: (B, H, Tz, Tx) -> average heads, swap to (B, Tx, Tz)
        attn = captured[0].mean(axis=1).swapaxes(1, 2)
        return logits, attn

    # ------------------------------------------------------------------
    # Public surface
    # ------------------------------------------------------------------

    def encode(self, x, drop_rng=None) -> Tensor:
        """Encode token ids (1-D sentence or 2-D batch) to hidden states."""
        x2d, single = _as_batch(x, "source")
        emb = ad.gather_rows(self.src_embed, x2d)
        h = self._encode_from_emb(emb, x2d, drop_rng)
        return ad.reshape(h, h.shape[1:]) if single else h

    def decode(self, z, h: Tensor, src_ids=None, drop_rng=None):
        """Run the decoder on prefix ids ``z`` against encoder output ``h``.

        Returns (logits, attn): logits are (Tz, V) for a 1-D ``z`` else
        (B, Tz, V); attn is the head-averaged cross-attention of the
        configured layer, (Tx, Tz) or (B, Tx, Tz). ``src_ids`` supplies the
        source pad mask and must be passed for padded batches.
        """
        z2d, single = _as_batch(z, "target prefix")
        if (z2d[:, 0] != self.config.bos_id).any():
            raise ContractError("decoder input must start with BOS")
        h3 = ad.reshape(h, (1,) + h.shape) if h.data.ndim == 2 else h
        x2d = None
        if src_ids is not None:
            x2d, _ = _as_batch(src_ids, "source")
        emb = ad.gather_rows(self.trg_embed, z2d)
        logits, attn = self._decode_from_emb(emb, z2d, h3, x2d, drop_rng)
        if single:
            return ad.reshape(logits, logits.shape[1:]), attn[0]
        return logits, attn

    def attention_map(self, x, z) -> AttentionMap:
        """Cross-attention matrix for one (source, target-prefix) pair."""
        with untracked():
            h = self.encode(x)
            _, attn = self.decode(z, h)
        return AttentionMap(attn)

    def _forward_loss(self, emb_x, emb_z, x2d, z2d, y2d, drop_rng):
        """Shared loss forward; returns (loss, logits, attn)."""
        if z2d.shape != y2d.shape:
            raise ContractError(
                f"target prefix shape {z2d.shape} != target shape {y2d.shape}"
            )
        if (z2d[:, 0] != self.config.bos_id).any():
            raise ContractError("decoder input must start with BOS")
        h = self._encode_from_emb(emb_x, x2d, drop_rng)
        logits, attn = self._decode_from_emb(emb_z, z2d, h, x2d, drop_rng)
        mask = (y2d != self.config.pad_id).astype(logits.dtype)
        per_sent = mask.sum(axis=1)
        if (per_sent == 0).any():
            raise ContractError("a sentence has no non-pad target tokens")
        weights = mask / (per_sent[:, None] * y2d.shape[0])
        return ad.nll_loss(logits, y2d, weights), logits, attn

    def loss_from_embeddings(self, emb_x: Tensor, emb_z: Tensor, x_ids, z_ids, y_ids,
                             drop_rng=None) -> Tensor:
        """Translation loss taking embedding tensors directly.

        ``emb_x``/``emb_z`` are the per-position embedding vectors (before
        scaling), shaped (B, T, D). This is the differentiation point for
        per-position input gradients and their finite-difference checks.
        """
        x2d, _ = _as_batch(x_ids, "source")
        z2d, _ = _as_batch(z_ids, "target prefix")
        y2d, _ = _as_batch(y_ids, "target")
        loss, _, _ = self._forward_loss(emb_x, emb_z, x2d, z2d, y2d, drop_rng)
        return loss

    def translation_loss(self, x, z, y, drop_rng=None) -> Tensor:
        """Mean over sentences of the per-sentence mean token NLL of y."""
        x2d, _ = _as_batch(x, "source")
        z2d, _ = _as_batch(z, "target prefix")
        emb_x = ad.gather_rows(self.src_embed, x2d)
        emb_z = ad.gather_rows(self.trg_embed, z2d)
        return self.loss_from_embeddings(emb_x, emb_z, x2d, z2d, y, drop_rng)

    def input_embedding_grads(self, x, z, y, return_forward: bool = False):
        """Per-position loss gradients w.r.t. the input embedding vectors.

        Runs its own tape (dropout off), so it can be called inside another
        tape's context without contaminating it. Parameter grad buffers are
        cleared afterwards; position gradients are returned as arrays of
        shape (Tx, D) and (Tz, D) for 1-D inputs, else (B, Tx, D)/(B, Tz, D).

        With ``return_forward`` the logits and cross-attention computed on
        the way are returned too, as (g_src, g_trg, logits, attn) — the
        adversarial constructor needs the same forward pass for its target
        likelihoods and saves repeating it.
        """
        x2d, single = _as_batch(x, "source")
        z2d, _ = _as_batch(z, "target prefix")
        y2d, _ = _as_batch(y, "target")
        with GradTape() as tape:
            emb_x = ad.gather_rows(self.src_embed, x2d)
            emb_z = ad.gather_rows(self.trg_embed, z2d)
            loss, logits, attn = self._forward_loss(emb_x, emb_z, x2d, z2d,
                                                    y2d, None)
        tape.backward(loss)
        g_src = emb_x.grad.copy()
        g_trg = emb_z.grad.copy()
        self.params.zero_grad()
        if single:
            if return_forward:
                return g_src[0], g_trg[0], logits.data[0].copy(), attn[0]
            return g_src[0], g_trg[0]
        if return_forward:
            return g_src, g_trg, logits.data.copy(), attn
        return g_src, g_trg

    def greedy_decode(self, x, max_steps: int | None = None):
        """Argmax decoding; stops per sentence at EOS or after max_steps.

        Returns generated target ids (EOS included when produced, BOS
        excluded) — one 1-D array, or a list of them for batched input.
        Ties and untrained parameters may surface special tokens; callers
        strip them for scoring.
        """
        cfg = self.config
        cap = cfg.max_len - 1 if max_steps is None else min(max_steps, cfg.max_len - 1)
        x2d, single = _as_batch(x, "source")
        B = x2d.shape[0]
        with untracked():
            h = self.encode(x2d)
            z = np.full((B, 1), cfg.bos_id, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(cap):
                logits, _ = self.decode(z, h, src_ids=x2d)
                nxt = logits.data[:, -1, :].argmax(axis=1).astype(np.int64)
                nxt = np.where(done, cfg.pad_id, nxt)
                z = np.concatenate([z, nxt[:, None]], axis=1)
                done |= nxt == cfg.eos_id
                if done.all():
                    break
        outs = []
        for b in range(B):
            toks = z[b, 1:]
            stop = np.nonzero(toks == cfg.eos_id)[0]
            outs.append(toks[: stop[0] + 1] if stop.size else toks.copy())
        return outs[0] if single else outs
