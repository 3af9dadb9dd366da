import math

import numpy as np
import pytest
from scipy import special

from evimr import _pykernels, kernels

BACKENDS = kernels.backends()


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_lgamma_digamma_against_scipy(name):
    k = BACKENDS[name]
    for x in [0.3, 0.5, 1.0, 1.5, 2.0, 3.7, 10.0, 55.5, 1e3]:
        assert math.isclose(k.lgamma(x), special.gammaln(x), rel_tol=1e-12, abs_tol=1e-13)
        assert math.isclose(k.digamma(x), special.digamma(x), rel_tol=1e-12, abs_tol=1e-13)


def _nig_draws(rng, n):
    return (rng.normal(size=n), rng.normal(size=n), rng.uniform(0.05, 5, n),
            rng.uniform(1.01, 8, n), rng.uniform(0.05, 5, n))


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
def test_backends_agree_on_nll(rng):
    args = _nig_draws(rng, 500)
    c, p = BACKENDS["cython"], BACKENDS["python"]
    np.testing.assert_allclose(c.nig_nll(*args), p.nig_nll(*args), rtol=1e-12, atol=1e-12)
    for gc, gp in zip(c.nig_nll_grad(*args), p.nig_nll_grad(*args)):
        np.testing.assert_allclose(gc, gp, rtol=1e-12, atol=1e-12)


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
def test_backends_agree_on_nms_and_ap(rng):
    c, p = BACKENDS["cython"], BACKENDS["python"]
    for _ in range(50):
        n = int(rng.integers(1, 30))
        s = rng.uniform(0, 0.8, n)
        e = s + rng.uniform(0.01, 0.2, n)
        sc = rng.integers(0, 5, n).astype(float)  # many ties
        thr = float(rng.uniform(0.1, 1.0))
        assert list(c.nms(s, e, sc, thr)) == list(p.nms(s, e, sc, thr))
        tp = (rng.random(n) < 0.4).astype(float)
        n_gt = int(tp.sum()) + int(rng.integers(0, 3))
        assert c.envelope_ap(tp, n_gt) == pytest.approx(p.envelope_ap(tp, n_gt), abs=1e-15)
        assert c.iou_1d(s[0], e[0], s[-1], e[-1]) == p.iou_1d(s[0], e[0], s[-1], e[-1])


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_broadcast_inputs(name):
    k = BACKENDS[name]
    out = k.nig_nll(np.zeros(3), 0.0, 1.0, 2.0, 1.0)
    assert out.shape == (3,)
    np.testing.assert_allclose(out, out[0])


def test_pure_python_iou_degenerate():
    assert _pykernels.iou_1d(0.3, 0.3, 0.3, 0.3) == 1.0
    assert _pykernels.iou_1d(0.3, 0.3, 0.4, 0.4) == 0.0


def test_env_switch_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, EVIMR_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from evimr import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "python"
