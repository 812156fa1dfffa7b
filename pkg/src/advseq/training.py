"""Joint adversarial training: robustness loss, combined objective, trainer.

The robustness loss perturbs a sentence pair in two phases — source words
first (against the clean-loss gradient), then decoder-input words (against
the loss under the perturbed source) — and scores the clean reference under
both perturbations. Construction runs untracked: the returned loss is
differentiable only through the final forward pass on the perturbed pair.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import advgen as AG
from . import autodiff as ad
from . import data as D
from .autodiff import GradTape, Tensor, untracked
from .bilm import BiLm, BiLmConfig
from .errors import ConfigError, ContractError, DataError, DivergedError
from .optim import Adam
from .seeding import child_rng
from .transformer import Transformer, TransformerConfig


@dataclass
class TrainConfig:
    """Optimizer schedule, batching, and loss-term switches."""

    adv: AG.AdvConfig = field(default_factory=AG.AdvConfig)
    lr_scale: float = 1.0
    warmup: int = 400
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    batch_tokens: int = 512
    max_steps: int = 100
    checkpoint_every: int = 0  # 0 → no periodic checkpoints
    enable_clean: bool = True
    enable_robust: bool = True
    enable_lm: bool = True
    perturb_src: bool = True
    perturb_trg: bool = True

    def __post_init__(self):
        if self.batch_tokens < 2:
            raise ConfigError(f"batch_tokens {self.batch_tokens} too small")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps {self.max_steps} negative")
        if self.warmup < 1:
            raise ConfigError(f"warmup {self.warmup} must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class TrainState:
    """Translation model, both language models, optimizer, and progress.

    All randomness is derived from (seed, step), so the random state is
    fully captured by the two integers stored here.
    """

    mt: Transformer
    bilm_x: BiLm
    bilm_y: BiLm
    optimizer: Adam
    seed: int
    step: int = 0

    @classmethod
    def create(cls, mt_config: TransformerConfig, train_config: TrainConfig,
               seed: int = 0) -> "TrainState":
        mt = Transformer(mt_config, seed=seed)
        lm_kw = dict(
            num_layers=mt_config.num_layers, model_dim=mt_config.model_dim,
            num_heads=mt_config.num_heads, ff_dim=mt_config.ff_dim,
            max_len=mt_config.max_len, dropout_rate=mt_config.dropout_rate,
            dtype=mt_config.dtype,
        )
        bilm_x = BiLm(BiLmConfig(vocab_size=mt_config.src_vocab_size, **lm_kw),
                      seed=2 * seed, embed=mt.src_embed)
        bilm_y = BiLm(BiLmConfig(vocab_size=mt_config.trg_vocab_size, **lm_kw),
                      seed=2 * seed + 1, embed=mt.trg_embed)
        tensors = (list(mt.params.tensors()) + list(bilm_x.params.tensors())
                   + list(bilm_y.params.tensors()))
        opt = Adam(tensors, mt_config.model_dim, lr_scale=train_config.lr_scale,
                   warmup=train_config.warmup, betas=train_config.betas,
                   eps=train_config.eps)
        return cls(mt, bilm_x, bilm_y, opt, seed=seed)

    def zero_grad(self):
        self.optimizer.zero_grad()


def _attack_side(s, q_rows, d_pos, grads, gamma, rng, embed, adv):
    res = AG.adv_gen(s, q_rows, d_pos, grads, gamma, rng, embed,
                     n=adv.n_candidates, excluded_ids=adv.excluded_ids)
    return res.tokens, res


def adversarial_pair(pair: D.SentencePair, state: TrainState,
                     adv: AG.AdvConfig, rng: np.random.Generator):
    """Construct (x', z') for one pair; runs entirely untracked.

    Returns (x_adv, z_adv, diagnostics). Source positions are sampled
    uniformly; decoder positions by attention mass transported from the
    changed source positions.
    """
    x, z, y = pair.x, pair.z, pair.y
    mt = state.mt
    diag = {"src_changed": 0, "trg_changed": 0,
            "src_status": "ok", "trg_status": "ok"}
    t0 = time.perf_counter()
    with untracked():
        x_adv = x.copy()
        if adv.gamma_src > 0:
            q_rows = AG.q_src(x, state.bilm_x)
            d_src = AG.source_position_distribution(x, adv.excluded_ids)
            g_src, _ = mt.input_embedding_grads(x, z, y)
            x_adv, res = _attack_side(x, q_rows, d_src, g_src, adv.gamma_src,
                                      rng, mt.src_embed.data, adv)
            diag["src_changed"] = len(res.changed_positions)
            diag["src_status"] = res.status
        z_adv = z.copy()
        if adv.gamma_trg > 0:
            lm_rows = state.bilm_y.position_distributions(z)
            _, g_trg, logits, attn = mt.input_embedding_grads(
                x_adv, z, y, return_forward=True)
            mt_rows = K.softmax_fwd(np.ascontiguousarray(logits))
            q_rows = AG.mix_target_likelihoods(lm_rows, mt_rows, adv.lam)
            special = np.isin(z, np.asarray(adv.excluded_ids, dtype=np.int64))
            d_trg = AG.target_position_distribution(attn, x, x_adv,
                                                    special_mask=special)
            z_adv, res = _attack_side(z, q_rows, d_trg, g_trg, adv.gamma_trg,
                                      rng, mt.trg_embed.data, adv)
            diag["trg_changed"] = len(res.changed_positions)
            diag["trg_status"] = res.status
    diag["advgen_seconds"] = time.perf_counter() - t0
    diag["x_adv"] = x_adv
    diag["z_adv"] = z_adv
    return x_adv, z_adv, diag


def robustness_loss(pair: D.SentencePair, state: TrainState,
                    adv: AG.AdvConfig, rng: np.random.Generator,
                    drop_rng=None):
    """Loss of the clean reference with both input sides perturbed.

    With both gammas zero this is bit-exactly the clean translation loss.
    """
    x_adv, z_adv, diag = adversarial_pair(pair, state, adv, rng)
    loss = state.mt.translation_loss(x_adv, z_adv, pair.y, drop_rng=drop_rng)
    return loss, diag


def adversarial_batch(batch: D.Batch, state: TrainState, adv: AG.AdvConfig,
                      step: int):
    """Perturbed copies of the batch's (x, z) matrices; runs untracked.

    Same two-phase procedure as adversarial_pair, but the gradient and
    likelihood passes run once over the whole padded batch instead of per
    sentence. Position/candidate draws still come from each sentence's own
    rng stream, child_rng(seed, "advgen", step, b), so a sentence's
    perturbation does not depend on its batch neighbours. Substitution
    preserves lengths, so the perturbed ids drop straight into copies of
    the padded matrices (z' need not be a shift of y).

    Returns (x_mat, z_mat, diag).
    """
    mt = state.mt
    x_mat = batch.x.copy()
    z_mat = batch.z.copy()
    diag = {"src_changed": 0, "trg_changed": 0}
    rngs = [child_rng(state.seed, "advgen", step, b) for b in range(len(batch))]
    t0 = time.perf_counter()
    with untracked():
        if adv.gamma_src > 0:
            q_all = state.bilm_x.position_distributions_batch(batch.x)
            g_src, _ = mt.input_embedding_grads(batch.x, batch.z, batch.y)
            for b in range(len(batch)):
                n = batch.src_lengths[b]
                xb = batch.x[b, :n]
                d_src = AG.source_position_distribution(xb, adv.excluded_ids)
                res = AG.adv_gen(xb, q_all[b, :n], d_src, g_src[b, :n],
                                 adv.gamma_src, rngs[b], mt.src_embed.data,
                                 n=adv.n_candidates,
                                 excluded_ids=adv.excluded_ids)
                x_mat[b, :n] = res.tokens
                diag["src_changed"] += len(res.changed_positions)
        if adv.gamma_trg > 0:
            lm_rows = state.bilm_y.position_distributions_batch(batch.z)
            _, g_trg, logits, attn = mt.input_embedding_grads(
                x_mat, batch.z, batch.y, return_forward=True)
            B, Tz, V = logits.shape
            mt_rows = K.softmax_fwd(
                np.ascontiguousarray(logits.reshape(B * Tz, V))
            ).reshape(B, Tz, V)
            for b in range(len(batch)):
                nz = batch.trg_lengths[b]
                nx = batch.src_lengths[b]
                zb = batch.z[b, :nz]
                q = AG.mix_target_likelihoods(lm_rows[b, :nz],
                                              mt_rows[b, :nz], adv.lam)
                special = np.isin(zb, np.asarray(adv.excluded_ids,
                                                 dtype=np.int64))
                d_trg = AG.target_position_distribution(
                    attn[b, :nx, :nz], batch.x[b, :nx], x_mat[b, :nx],
                    special_mask=special)
                res = AG.adv_gen(zb, q, d_trg, g_trg[b, :nz], adv.gamma_trg,
                                 rngs[b], mt.trg_embed.data,
                                 n=adv.n_candidates,
                                 excluded_ids=adv.excluded_ids)
                z_mat[b, :nz] = res.tokens
                diag["trg_changed"] += len(res.changed_positions)
    diag["advgen_seconds"] = time.perf_counter() - t0
    return x_mat, z_mat, diag


def _effective_adv(config: TrainConfig) -> AG.AdvConfig:
    adv = config.adv
    if not config.perturb_src:
        adv = dataclasses.replace(adv, gamma_src=0.0)
    if not config.perturb_trg:
        adv = dataclasses.replace(adv, gamma_trg=0.0)
    return adv


def total_loss(batch: D.Batch, state: TrainState, config: TrainConfig,
               step: int = 0, train_mode: bool = False):
    """Unweighted sum of the enabled loss terms for one batch.

    Terms: clean translation loss, robustness loss (adversarial_batch
    construction plus one forward on the perturbed matrices), and the two
    language-model losses (source sentences; decoder-input sequences).
    Returns (Tensor, metrics).
    """
    if not (config.enable_clean or config.enable_robust or config.enable_lm):
        raise ConfigError("all loss terms disabled")
    if len(batch) == 0:
        raise ContractError("empty batch")

    def drop_rng(term):
        if not train_mode:
            return None
        return child_rng(state.seed, "dropout", step, term)

    terms = []
    metrics = {}
    if config.enable_clean:
        l_clean = state.mt.translation_loss(batch.x, batch.z, batch.y,
                                            drop_rng=drop_rng("clean"))
        terms.append(l_clean)
        metrics["L_clean"] = float(l_clean.data)
    if config.enable_robust:
        adv = _effective_adv(config)
        x_mat, z_mat, diag = adversarial_batch(batch, state, adv, step)
        l_robust = state.mt.translation_loss(x_mat, z_mat, batch.y,
                                             drop_rng=drop_rng("robust"))
        terms.append(l_robust)
        metrics["L_robust"] = float(l_robust.data)
        metrics["src_replaced"] = diag["src_changed"]
        metrics["trg_replaced"] = diag["trg_changed"]
        metrics["advgen_seconds"] = diag["advgen_seconds"]
    if config.enable_lm:
        l_lm_x = state.bilm_x.lm_loss(batch.x, drop_rng=drop_rng("lm_x"))
        l_lm_y = state.bilm_y.lm_loss(batch.z, drop_rng=drop_rng("lm_y"))
        terms.extend([l_lm_x, l_lm_y])
        metrics["L_lm_x"] = float(l_lm_x.data)
        metrics["L_lm_y"] = float(l_lm_y.data)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    metrics["total"] = float(total.data)
    return total, metrics


def train(pairs, state: TrainState, config: TrainConfig,
          metrics_path=None, checkpoint_dir=None):
    """Optimizer steps over epochs of batches; returns per-step metrics.

    Writes one JSON object per step to metrics_path when given; raises
    DivergedError on a non-finite loss. Disabled terms are absent from
    the metric records.
    """
    from .checkpoint import save_state  # local import: checkpoint imports us

    pairs = list(pairs)
    if not pairs:
        raise DataError("empty training corpus")
    records = []
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        epoch = 0
        while state.step < config.max_steps:
            batches = D.batch_iter(pairs, config.batch_tokens,
                                   shuffle_seed=state.seed + 7919 * epoch)
            epoch += 1
            for batch in batches:
                if state.step >= config.max_steps:
                    break
                step = state.step + 1
                t0 = time.perf_counter()
                state.zero_grad()
                with GradTape() as tape:
                    total, metrics = total_loss(batch, state, config,
                                                step=step, train_mode=True)
                if not np.isfinite(total.data):
                    raise DivergedError(
                        f"non-finite loss {float(total.data)} at step {step}")
                tape.backward(total)
                lr = state.optimizer.step()
                state.step = step
                metrics["step"] = step
                metrics["lr"] = lr
                metrics["step_seconds"] = time.perf_counter() - t0
                records.append(metrics)
                if fh is not None:
                    fh.write(json.dumps(metrics, sort_keys=True) + "\n")
                    fh.flush()
                if (checkpoint_dir and config.checkpoint_every
                        and state.step % config.checkpoint_every == 0):
                    save_state(state, f"{checkpoint_dir}/step{state.step:06d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    return records
