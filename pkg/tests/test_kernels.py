"""Parity between the compiled kernels and the NumPy fallback."""

import numpy as np
import pytest

from advseq._kernels import _native, numpy_backend

pytestmark = pytest.mark.skipif(_native is None, reason="native extension not built")

TOLS = {np.float32: dict(rtol=2e-5, atol=2e-6), np.float64: dict(rtol=1e-11, atol=1e-12)}


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def _rand(rng, shape, dtype):
    return rng.uniform(-2, 2, size=shape).astype(dtype)


def test_softmax_parity(dtype):
    rng = np.random.default_rng(0)
    x = _rand(rng, (17, 33), dtype)
    gy = _rand(rng, (17, 33), dtype)
    y_n, y_p = _native.softmax_fwd(x), numpy_backend.softmax_fwd(x)
    np.testing.assert_allclose(y_n, y_p, **TOLS[dtype])
    np.testing.assert_allclose(
        _native.softmax_bwd(y_n, gy), numpy_backend.softmax_bwd(y_p, gy), **TOLS[dtype]
    )


def test_layer_norm_parity(dtype):
    rng = np.random.default_rng(1)
    x = _rand(rng, (9, 24), dtype)
    gain = _rand(rng, (24,), dtype)
    bias = _rand(rng, (24,), dtype)
    gy = _rand(rng, (9, 24), dtype)
    yn, mn, rn = _native.layer_norm_fwd(x, gain, bias, 1e-5)
    yp, mp, rp = numpy_backend.layer_norm_fwd(x, gain, bias, 1e-5)
    np.testing.assert_allclose(yn, yp, **TOLS[dtype])
    for a, b in zip(_native.layer_norm_bwd(gy, x, gain, mn, rn),
                    numpy_backend.layer_norm_bwd(gy, x, gain, mp, rp)):
        np.testing.assert_allclose(a, b, **TOLS[dtype])


def test_nll_parity(dtype):
    rng = np.random.default_rng(2)
    logits = _rand(rng, (21, 50), dtype)
    ids = rng.integers(0, 50, size=21)
    w = rng.uniform(0, 1, size=21).astype(dtype)
    ln, pn = _native.nll_fwd(logits, ids, w)
    lp, pp = numpy_backend.nll_fwd(logits, ids, w)
    assert ln == pytest.approx(lp, rel=1e-6)
    np.testing.assert_allclose(pn, pp, **TOLS[dtype])
    np.testing.assert_allclose(
        _native.nll_bwd(pn, ids, w, 0.7), numpy_backend.nll_bwd(pp, ids, w, 0.7), **TOLS[dtype]
    )


def test_adam_parity(dtype):
    rng = np.random.default_rng(3)
    args = [_rand(rng, (64,), dtype) for _ in range(4)]
    pn, gn, mn, vn = [a.copy() for a in args]
    pp, gp, mp, vp = [a.copy() for a in args]
    vn = np.abs(vn)
    vp = vn.copy()
    _native.adam_step(pn, gn, mn, vn, 1e-3, 0.9, 0.98, 1e-9, 0.1, 0.02)
    numpy_backend.adam_step(pp, gp, mp, vp, 1e-3, 0.9, 0.98, 1e-9, 0.1, 0.02)
    np.testing.assert_allclose(pn, pp, **TOLS[dtype])
    np.testing.assert_allclose(mn, mp, **TOLS[dtype])
    np.testing.assert_allclose(vn, vp, **TOLS[dtype])


def test_scatter_add_parity(dtype):
    rng = np.random.default_rng(4)
    out_n = np.zeros((10, 8), dtype=dtype)
    out_p = np.zeros((10, 8), dtype=dtype)
    ids = rng.integers(0, 10, size=40)
    rows = _rand(rng, (40, 8), dtype)
    _native.scatter_add_rows(out_n, ids, rows)
    numpy_backend.scatter_add_rows(out_p, ids, rows)
    np.testing.assert_allclose(out_n, out_p, **TOLS[dtype])
