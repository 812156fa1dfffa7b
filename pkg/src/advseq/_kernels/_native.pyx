# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused softmax, layer norm, weighted NLL, Adam and
embedding scatter-add. Mirrors numpy_backend's contracts; loss accumulation
is in float64 for both dtypes."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    out_np = np.empty((n, c), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = exp(<double> x[i, j] - m)
            out[i, j] = <real> e
            s += e
        for j in range(c):
            out[i, j] = <real> (out[i, j] / s)
    return out_np


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], c = y.shape[1]
    gx_np = np.empty((n, c), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] gx = gx_np
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += <double> y[i, j] * <double> gy[i, j]
        for j in range(c):
            gx[i, j] = <real> (<double> y[i, j] * (<double> gy[i, j] - dot))
    return gx_np


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    dt = np.asarray(x).dtype
    y_np = np.empty((n, c), dtype=dt)
    mean_np = np.empty(n, dtype=dt)
    rstd_np = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = y_np
    cdef real[::1] mean = mean_np, rstd = rstd_np
    cdef Py_ssize_t i, j
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(c):
            mu += x[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = <double> x[i, j] - mu
            var += d * d
        var /= c
        r = 1.0 / sqrt(var + eps)
        mean[i] = <real> mu
        rstd[i] = <real> r
        for j in range(c):
            y[i, j] = <real> (((<double> x[i, j] - mu) * r) * <double> gain[j] + <double> bias[j])
    return y_np, mean_np, rstd_np


def layer_norm_bwd(real[:, ::1] gy, real[:, ::1] x, real[::1] gain,
                   real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    dt = np.asarray(x).dtype
    gx_np = np.empty((n, c), dtype=dt)
    dgain_np = np.zeros(c, dtype=dt)
    dbias_np = np.zeros(c, dtype=dt)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] dgain = dgain_np, dbias = dbias_np
    cdef Py_ssize_t i, j
    cdef double mu, r, xhat, gxh, m1, m2
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            xhat = (<double> x[i, j] - mu) * r
            gxh = <double> gy[i, j] * <double> gain[j]
            m1 += gxh
            m2 += gxh * xhat
            dgain[j] += <real> (<double> gy[i, j] * xhat)
            dbias[j] += gy[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            xhat = (<double> x[i, j] - mu) * r
            gxh = <double> gy[i, j] * <double> gain[j]
            gx[i, j] = <real> (r * (gxh - m1 - xhat * m2))
    return gx_np, dgain_np, dbias_np


def nll_fwd(real[:, ::1] logits, cnp.int64_t[::1] ids, real[::1] weights):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    probs_np = np.empty((n, v), dtype=np.asarray(logits).dtype)
    cdef real[:, ::1] probs = probs_np
    cdef Py_ssize_t i, j
    cdef double m, s, e, loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = exp(<double> logits[i, j] - m)
            probs[i, j] = <real> e
            s += e
        for j in range(v):
            probs[i, j] = <real> (probs[i, j] / s)
        loss -= <double> weights[i] * ((<double> logits[i, ids[i]] - m) - log(s))
    return float(loss), probs_np


def nll_bwd(real[:, ::1] probs, cnp.int64_t[::1] ids, real[::1] weights, double gloss):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1]
    g_np = np.empty((n, v), dtype=np.asarray(probs).dtype)
    cdef real[:, ::1] g = g_np
    cdef Py_ssize_t i, j
    cdef double w
    for i in range(n):
        w = <double> weights[i] * gloss
        for j in range(v):
            g[i, j] = <real> (<double> probs[i, j] * w)
        g[i, ids[i]] -= <real> w
    return g_np


def adam_step(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
              double lr, double beta1, double beta2, double eps,
              double bias1, double bias2):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double g, mi, vi
    for i in range(n):
        g = grad[i]
        mi = beta1 * <double> m[i] + (1.0 - beta1) * g
        vi = beta2 * <double> v[i] + (1.0 - beta2) * g * g
        m[i] = <real> mi
        v[i] = <real> vi
        param[i] -= <real> (lr * (mi / bias1) / (sqrt(vi / bias2) + eps))


def scatter_add_rows(real[:, ::1] out, cnp.int64_t[::1] ids, real[:, ::1] rows):
    cdef Py_ssize_t n = rows.shape[0], c = rows.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = ids[i]
        for j in range(c):
            out[r, j] += rows[i, j]
