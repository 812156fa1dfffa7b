"""Sublayer primitives shared by the translation model and the LM stacks.

All functions take a ParamSet plus a name prefix and build the op graph on
whatever tape is active. Additive attention masks use 0/-inf entries so that
masked positions contribute exactly zero weight (softmax of -inf underflows
to 0.0), which is what makes the causality and context-isolation guarantees
bit-exact rather than approximate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def as_batch(ids, what: str):
    """Coerce 1-D or 2-D token ids to (batch, time) plus a was-1-D flag."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ShapeError(f"{what} must be 1-D or 2-D ids, got shape {arr.shape}")


def linear(ps, name: str, x: Tensor) -> Tensor:
    w = ps[f"{name}.w"]
    b = ps[f"{name}.b"]
    shp = x.shape
    flat = ad.reshape(x, (-1, shp[-1]))
    y = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(y, shp[:-1] + (w.shape[1],))


def lnorm(ps, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, ps[f"{name}.gain"], ps[f"{name}.bias"])


def maybe_dropout(x: Tensor, rate: float, drop_rng) -> Tensor:
    if drop_rng is None or rate == 0.0:
        return x
    return ad.dropout(x, rate, drop_rng)


def mha(ps, name: str, q_in: Tensor, kv_in: Tensor, num_heads: int, bias,
        drop_rate: float = 0.0, drop_rng=None, capture=None) -> Tensor:
    """Multi-head attention sublayer.

    ``bias`` is a (B, H, Tq, Tk) additive 0/-inf array or None. ``capture``,
    when given, receives the post-softmax attention weights as a plain array
    (shape (B, H, Tq, Tk)).
    """
    B, Tq, D = q_in.shape
    Tk = kv_in.shape[1]
    dh = D // num_heads
    q = linear(ps, f"{name}.q", q_in)
    k = linear(ps, f"{name}.k", kv_in)
    v = linear(ps, f"{name}.v", kv_in)
    q4 = ad.transpose(ad.reshape(q, (B, Tq, num_heads, dh)), (0, 2, 1, 3))
    k4 = ad.transpose(ad.reshape(k, (B, Tk, num_heads, dh)), (0, 2, 3, 1))
    v4 = ad.transpose(ad.reshape(v, (B, Tk, num_heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q4, k4), dh ** -0.5)
    if bias is not None:
        scores = ad.add(scores, Tensor(bias, dtype=scores.dtype))
    attn = ad.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(attn.data)
    ctx = ad.matmul(attn, v4)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tq, D))
    return maybe_dropout(linear(ps, f"{name}.o", merged), drop_rate, drop_rng)


def ffn(ps, name: str, x: Tensor, drop_rate: float, drop_rng) -> Tensor:
    h = ad.relu(linear(ps, f"{name}.ff1", x))
    return maybe_dropout(linear(ps, f"{name}.ff2", h), drop_rate, drop_rng)


def key_pad_bias(key_ids: np.ndarray, pad_id: int, num_heads: int, num_q: int,
                 dtype) -> np.ndarray | None:
    """(B, H, Tq, Tk) additive mask hiding pad keys, or None if no pads."""
    pad = key_ids == pad_id
    if not pad.any():
        return None
    B, Tk = key_ids.shape
    bias = np.where(pad[:, None, None, :], -np.inf, 0.0).astype(dtype)
    return np.broadcast_to(bias, (B, num_heads, num_q, Tk))


def causal_bias(key_ids: np.ndarray, pad_id: int, num_heads: int, dtype) -> np.ndarray:
    """(B, H, T, T) additive mask: causal upper triangle plus pad keys."""
    B, T = key_ids.shape
    causal = np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)
    pad = key_ids == pad_id
    combined = causal[None, None, :, :] + np.where(
        pad[:, None, None, :], -np.inf, 0.0
    ).astype(dtype)
    return np.broadcast_to(combined, (B, num_heads, T, T))
