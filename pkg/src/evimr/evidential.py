"""Normal-Inverse-Gamma evidential distribution over a scalar boundary.

Scalar API (``NIGParams``, ``student_t_nll``, ...) for clarity and tests, plus
vectorized ``*_batch`` helpers used by the training path. Both share the same
kernels from :mod:`evimr.kernels`.
"""

from dataclasses import dataclass
import math

import numpy as np

from evimr import kernels

EPS = 1e-6
POLE_EPS = 1e-6
_COMPONENTS = ("gamma", "upsilon", "alpha", "beta")


class NIGError(ValueError):
    """Invalid NIG parameters or evaluation at the alpha=1 pole."""


@dataclass(frozen=True)
class NIGParams:
    gamma: float
    upsilon: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in _COMPONENTS:
            if not math.isfinite(getattr(self, name)):
                raise NIGError(f"NIG component {name} is not finite: {getattr(self, name)!r}")
        if not self.upsilon > 0:
            raise NIGError(f"upsilon must be > 0, got {self.upsilon}")
        if not self.alpha > 1:
            raise NIGError(f"alpha must be > 1, got {self.alpha}")
        if not self.beta > 0:
            raise NIGError(f"beta must be > 0, got {self.beta}")

    def as_tuple(self):
        return (self.gamma, self.upsilon, self.alpha, self.beta)


@dataclass(frozen=True)
class GaussianMoments:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")


@dataclass(frozen=True)
class UncertaintyTriple:
    prediction: float
    aleatoric: float
    epistemic: float


def softplus(x):
    """ln(1 + e^x), overflow-safe; works on scalars and arrays."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def constrain_raw_to_nig(raw):
    """Map four unconstrained head outputs onto a valid ``NIGParams``."""
    raw = [float(v) for v in raw]
    if len(raw) != 4:
        raise NIGError(f"expected 4 raw values, got {len(raw)}")
    for name, v in zip(_COMPONENTS, raw):
        if not math.isfinite(v):
            raise NIGError(f"raw {name} component is not finite: {v!r}")
    return NIGParams(
        gamma=raw[0],
        upsilon=float(softplus(raw[1])) + EPS,
        alpha=float(softplus(raw[2])) + 1.0 + EPS,
        beta=float(softplus(raw[3])) + EPS,
    )


def constrain_batch(raw):
    """Vectorized constraint map over a trailing axis of size 4.

    Returns ``(gamma, upsilon, alpha, beta)`` arrays and the Jacobian diagonal
    ``d(constrained)/d(raw)`` stacked on the trailing axis.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 4:
        raise NIGError(f"trailing axis must have size 4, got shape {raw.shape}")
    gamma = raw[..., 0]
    upsilon = softplus(raw[..., 1]) + EPS
    alpha = softplus(raw[..., 2]) + 1.0 + EPS
    beta = softplus(raw[..., 3]) + EPS
    jac = np.stack([np.ones_like(gamma), sigmoid(raw[..., 1]),
                    sigmoid(raw[..., 2]), sigmoid(raw[..., 3])], axis=-1)
    return (gamma, upsilon, alpha, beta), jac


def student_t_nll(b, p: NIGParams) -> float:
    """-log St(b; gamma, beta(1+upsilon)/(upsilon alpha), 2 alpha)."""
    return float(kernels.nig_nll(b, p.gamma, p.upsilon, p.alpha, p.beta))


def nll_gradients(b, p: NIGParams):
    """Exact partials of :func:`student_t_nll` w.r.t. (gamma, upsilon, alpha, beta)."""
    grads = kernels.nig_nll_grad(b, p.gamma, p.upsilon, p.alpha, p.beta)
    return tuple(float(g) for g in grads)


def nll_raw_gradients(b, raw):
    """Gradient of the NLL w.r.t. the four *raw* head outputs (chain rule through softplus)."""
    (g, u, a, be), jac = constrain_batch(np.asarray(raw, dtype=np.float64))
    grads = np.stack(kernels.nig_nll_grad(b, g, u, a, be), axis=-1)
    return grads * jac


def nig_uncertainties(p: NIGParams) -> UncertaintyTriple:
    if p.alpha <= 1.0 + POLE_EPS:
        raise NIGError(f"alpha={p.alpha!r} is at the alpha=1 pole of the uncertainty formulas")
    aleatoric = p.beta / (p.alpha - 1.0)
    return UncertaintyTriple(p.gamma, aleatoric, aleatoric / p.upsilon)


def uncertainties_batch(upsilon, alpha, beta):
    """Vectorized (aleatoric, epistemic).

    Unlike the scalar form this does not raise: the constraint map already
    keeps ``alpha - 1 >= EPS``.
    """
    aleatoric = np.asarray(beta) / (np.asarray(alpha) - 1.0)
    return aleatoric, aleatoric / np.asarray(upsilon)


def nig_moments(p: NIGParams) -> GaussianMoments:
    """Posterior-mean Gaussian (E[mu], E[sigma^2]) implied by the prior."""
    return GaussianMoments(p.gamma, p.beta / (p.alpha - 1.0))
