"""Evidence regularizers: the vanilla error-times-evidence penalty and the
line ("geom") penalty on batch-normalized error/evidence, plus gradient-field
sampling for diagnostics.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from evimr.evidential import EPS, NIGParams


class RegularizerMode(str, Enum):
    NONE = "none"
    NLL_ONLY = "nll_only"
    VANILLA = "vanilla"
    GEOM = "geom"


@dataclass(frozen=True)
class EvidencePair:
    delta: float
    phi: float

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"error must be >= 0, got {self.delta}")
        if not self.phi > 0:
            raise ValueError(f"evidence must be > 0, got {self.phi}")


@dataclass(frozen=True)
class NormalizedPair:
    delta_bar: float
    phi_bar: float

    def __post_init__(self):
        for name in ("delta_bar", "phi_bar"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def evidence_pair(b, p: NIGParams) -> EvidencePair:
    return EvidencePair(abs(b - p.gamma), 2.0 * p.upsilon + p.alpha)


def vanilla_regularizer(pair: EvidencePair):
    """Returns ``(loss, d loss / d phi)``; the gradient is the error itself."""
    return pair.delta * pair.phi, pair.delta


def normalize_batch(pairs):
    """Max-normalize error and evidence over a batch.

    The batch maxima are statistics, not functions of any one sample: callers
    must treat them as constants when differentiating.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot normalize an empty batch")
    delta = np.array([p.delta for p in pairs])
    phi = np.array([p.phi for p in pairs])
    d_bar, p_bar, _, _ = normalize_arrays(delta, phi)
    return [NormalizedPair(float(d), float(p)) for d, p in zip(d_bar, p_bar)]


def normalize_arrays(delta, phi, delta_max=None, phi_max=None):
    """Array form of :func:`normalize_batch`; returns (delta_bar, phi_bar, delta_max, phi_max).

    Passing explicit maxima reuses frozen statistics (needed for finite-difference
    checks of the stop-gradient).
    """
    delta = np.asarray(delta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if delta.size == 0:
        raise ValueError("cannot normalize an empty batch")
    if delta_max is None:
        delta_max = float(delta.max())
    if phi_max is None:
        phi_max = float(phi.max())
    return delta / (delta_max + EPS), phi / (phi_max + EPS), delta_max, phi_max


def geom_regularizer(np_pair: NormalizedPair):
    """Returns ``(loss, d loss / d phi_bar)`` for the line penalty (d+p-1)^2."""
    r = np_pair.delta_bar + np_pair.phi_bar - 1.0
    return r * r, 2.0 * r


def sample_gradient_field(mode, resolution: int):
    """Minus-gradient w.r.t. evidence on a ``resolution x resolution`` grid over [0, 1]^2.

    Rows are ``(delta, phi, minus_grad)`` ordered delta-major.
    """
    mode = RegularizerMode(mode)
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    if mode not in (RegularizerMode.VANILLA, RegularizerMode.GEOM):
        raise ValueError(f"gradient field only defined for vanilla/geom, got {mode.value}")
    n = resolution - 1
    rows = []
    # integer grid so points on the line d + p = 1 get an exact zero
    for i in range(resolution):
        for j in range(resolution):
            if mode is RegularizerMode.VANILLA:
                g = -i / n
            else:
                g = -2.0 * (i + j - n) / n
            rows.append((i / n, j / n, float(g)))
    return rows
