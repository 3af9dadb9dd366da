import numpy as np
import pytest

from evimr.evidential import NIGParams
from evimr.regularizers import (
    EvidencePair, NormalizedPair, RegularizerMode, evidence_pair, geom_regularizer, normalize_arrays,
    normalize_batch, sample_gradient_field, vanilla_regularizer,
)


def test_vanilla_value_and_gradient():
    loss, g = vanilla_regularizer(EvidencePair(0.3, 5.0))
    assert loss == pytest.approx(1.5)
    assert g == 0.3


def test_evidence_pair():
    pair = evidence_pair(0.7, NIGParams(0.5, 2.0, 3.0, 1.0))
    assert pair.delta == pytest.approx(0.2)
    assert pair.phi == 7.0


def test_geom_zero_on_line():
    for d in np.linspace(0, 1, 11):
        loss, g = geom_regularizer(NormalizedPair(d, 1.0 - d))
        assert abs(loss) < 1e-24 and abs(g) < 1e-12


def test_regularizer_gradients_finite_difference(rng):
    h = 1e-5
    for _ in range(100):
        d, p = rng.uniform(0, 1, 2)
        _, g = geom_regularizer(NormalizedPair(d, p))
        num = (geom_regularizer(NormalizedPair(d, p + h))[0] - geom_regularizer(NormalizedPair(d, p - h))[0]) / (2 * h)
        assert abs(g - num) / max(abs(g), abs(num), 1e-8) < 1e-4
        phi = rng.uniform(1, 10)
        _, gv = vanilla_regularizer(EvidencePair(d, phi))
        numv = (vanilla_regularizer(EvidencePair(d, phi + h))[0] - vanilla_regularizer(EvidencePair(d, phi - h))[0]) / (2 * h)
        assert abs(gv - numv) / max(abs(gv), abs(numv), 1e-8) < 1e-4


def test_normalize_batch():
    pairs = [EvidencePair(0.5, 2.0), EvidencePair(1.0, 4.0), EvidencePair(0.0, 1.0)]
    out = normalize_batch(pairs)
    assert out[1].delta_bar == pytest.approx(1.0, abs=1e-5)
    assert out[2].delta_bar == 0.0
    assert out[0].phi_bar == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        normalize_batch([])


def test_normalize_arrays_frozen_maxima():
    d, p, dm, pm = normalize_arrays([1.0, 2.0], [3.0, 6.0])
    assert (dm, pm) == (2.0, 6.0)
    d2, p2, _, _ = normalize_arrays([1.0, 2.0], [3.0, 6.0], delta_max=4.0, phi_max=12.0)
    np.testing.assert_allclose(d2 * 2, d, rtol=1e-6)
    np.testing.assert_allclose(p2 * 2, p, rtol=1e-6)


def test_invalid_pairs():
    with pytest.raises(ValueError):
        EvidencePair(-0.1, 1.0)
    with pytest.raises(ValueError):
        NormalizedPair(0.5, 1.5)


def test_gradient_field_vanilla():
    rows = sample_gradient_field("vanilla", 11)
    assert len(rows) == 121
    by_delta = {}
    for d, p, g in rows:
        assert g <= 0
        by_delta.setdefault(d, set()).add(g)
    assert all(len(v) == 1 for v in by_delta.values())


def test_gradient_field_geom_sign():
    rows = sample_gradient_field(RegularizerMode.GEOM, 11)
    assert len(rows) == 121
    for k, (d, p, g) in enumerate(rows):
        i, j = divmod(k, 11)
        assert (d, p) == (i / 10, j / 10)
        assert np.sign(g) == np.sign(10 - i - j)


@pytest.mark.parametrize("mode,res", [("nll_only", 11), ("geom", 1)])
def test_gradient_field_rejects(mode, res):
    with pytest.raises(ValueError):
        sample_gradient_field(mode, res)
