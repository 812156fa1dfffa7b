"""Pure-NumPy reference implementations of the hot kernels.

Same contracts as ``_native`` (the Cython build): 2-D row-major float32 or
float64 inputs, int64 index arrays. Loss accumulation happens in float64 in
both backends; elementwise results may differ between backends at the level
of float rounding (NumPy uses pairwise summation), so cross-backend checks
are tolerance-based, never bit-exact.
"""

from __future__ import annotations

import numpy as np


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient wrt the softmax input given output y and upstream gy."""
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_fwd(x, gain, bias, eps):
    """Row layer norm. Returns (y, mean, rstd) with mean/rstd per row."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gain + bias
    return y, mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_bwd(gy, x, gain, mean, rstd):
    """Backward of layer_norm_fwd. Returns (gx, dgain, dbias)."""
    xhat = (x - mean[:, None].astype(x.dtype)) * rstd[:, None].astype(x.dtype)
    gxhat = gy * gain
    dgain = (gy * xhat).sum(axis=0)
    dbias = gy.sum(axis=0)
    n = x.shape[1]
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None].astype(x.dtype) * (gxhat - m1 - xhat * m2)
    del n
    return gx, dgain, dbias


def nll_fwd(logits, ids, weights):
    """Weighted NLL over rows: sum_i w_i * (logsumexp_i - logits[i, ids[i]]).

    Returns (loss as float, probs) where probs are the softmax rows cached
    for the backward pass. Accumulates the loss in float64.
    """
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    denom = e.sum(axis=1)
    probs = e / denom[:, None]
    rows = np.arange(logits.shape[0])
    logp = shifted[rows, ids] - np.log(denom)
    loss = -np.sum(weights.astype(np.float64) * logp.astype(np.float64))
    return float(loss), probs


def nll_bwd(probs, ids, weights, gloss):
    """Gradient wrt logits: gloss * w_i * (probs_i - onehot(ids_i))."""
    g = probs * weights[:, None]
    rows = np.arange(probs.shape[0])
    g[rows, ids] -= weights
    g *= np.asarray(gloss, dtype=probs.dtype)
    return g


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """Fused in-place Adam update on flat arrays.

    bias1/bias2 are the bias corrections 1-beta^t, precomputed by the caller.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bias1
    vhat = v / bias2
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def scatter_add_rows(out, ids, rows):
    """out[ids[i]] += rows[i] with repeated ids accumulating."""
    np.add.at(out, ids, rows)
