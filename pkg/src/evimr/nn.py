"""Minimal differentiable blocks with hand-written reverse passes.

Every block is a ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward`` taking the upstream gradient and the cache. All blocks accept
arrays with arbitrary leading batch axes; the last two axes are (rows, cols).
"""

from dataclasses import dataclass, field
import math
import zlib

import numpy as np


class ShapeError(ValueError):
    pass


def as_tensor2d(x, name="tensor"):
    """Validate a (rows x cols) float64 array with finite entries."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _sum_leading(g, ndim):
    """Sum a gradient over broadcast leading axes down to ``ndim`` dims."""
    while g.ndim > ndim:
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------- affine

def affine_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"affine: input {x.shape} incompatible with W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def affine_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    dW = _sum_leading(np.swapaxes(x, -1, -2) @ dy, 2)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def linear_forward(x, W):
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with W {W.shape}")
    return x @ W, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    return dy @ W.T, _sum_leading(np.swapaxes(x, -1, -2) @ dy, 2)


# ---------------------------------------------------------------- softmax

def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def log_softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- attention

def scaled_dot_attention(Qm, Km, Vm, d_k=None):
    """Softmax(Qm Km^T / sqrt(d_k)) Vm. Returns ``(out, cache)``."""
    if d_k is None:
        d_k = Qm.shape[-1]
    if Qm.shape[-1] != d_k or Km.shape[-1] != d_k:
        raise ShapeError(f"attention: query {Qm.shape} / key {Km.shape} width must equal d_k={d_k}")
    if Km.shape[-2] != Vm.shape[-2]:
        raise ShapeError(f"attention: {Km.shape[-2]} keys but {Vm.shape[-2]} values")
    scale = 1.0 / math.sqrt(d_k)
    A = softmax_rows((Qm @ np.swapaxes(Km, -1, -2)) * scale)
    return A @ Vm, (Qm, Km, Vm, A, scale)


def scaled_dot_attention_backward(dO, cache):
    Qm, Km, Vm, A, scale = cache
    dA = dO @ np.swapaxes(Vm, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dO
    dS = softmax_backward(dA, A) * scale
    dQ = dS @ Km
    dK = np.swapaxes(dS, -1, -2) @ Qm
    return dQ, dK, dV


def projected_attention_forward(x_query, x_context, Wq, Wk, Wv):
    """Attention with linear projections: queries from ``x_query``, keys/values from ``x_context``."""
    if x_query.shape[-1] != x_context.shape[-1]:
        raise ShapeError(f"feature width mismatch: {x_query.shape} vs {x_context.shape}")
    q, cq = linear_forward(x_query, Wq)
    k, ck = linear_forward(x_context, Wk)
    v, cv = linear_forward(x_context, Wv)
    out, ca = scaled_dot_attention(q, k, v, Wq.shape[1])
    return out, (cq, ck, cv, ca)


def projected_attention_backward(dout, cache):
    """Returns ``(d_query_in, d_context_in, dWq, dWk, dWv)``."""
    cq, ck, cv, ca = cache
    dq, dk, dv = scaled_dot_attention_backward(dout, ca)
    dxq, dWq = linear_backward(dq, cq)
    dxk, dWk = linear_backward(dk, ck)
    dxv, dWv = linear_backward(dv, cv)
    return dxq, dxk + dxv, dWq, dWk, dWv


# ---------------------------------------------------------------- mlp / embedding

def mlp_forward(x, W1, b1, W2, b2):
    """Two-layer perceptron with a tanh hidden layer (smooth, so gradient checks stay exact)."""
    h_pre, c1 = affine_forward(x, W1, b1)
    h = np.tanh(h_pre)
    y, c2 = affine_forward(h, W2, b2)
    return y, (c1, h, c2)


def mlp_backward(dy, cache):
    c1, h, c2 = cache
    dh, dW2, db2 = affine_backward(dy, c2)
    dx, dW1, db1 = affine_backward(dh * (1.0 - h * h), c1)
    return dx, dW1, db1, dW2, db2


def embedding_forward(ids, table):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range for table of {table.shape[0]} rows")
    return table[ids], (ids, table.shape)


def embedding_backward(dy, cache):
    ids, shape = cache
    dtable = np.zeros(shape)
    np.add.at(dtable, ids.reshape(-1), dy.reshape(-1, shape[1]))
    return dtable


# ---------------------------------------------------------------- parameters

def _name_seed(seed, name):
    return np.random.SeedSequence([seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, zlib.crc32(name.encode())])


class ParamStore:
    """Named parameters with matching gradient slots and Adam moments."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0
        self.frozen = set()

    def add(self, name, shape, init="xavier"):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "xavier":
            fan_in, fan_out = shape[0], shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            rng = np.random.default_rng(_name_seed(self.seed, name))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = value
        self.grads[name] = np.zeros(shape)
        self.m[name] = np.zeros(shape)
        self.v[name] = np.zeros(shape)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def accumulate(self, name, g):
        slot = self.grads[name]
        if g.shape != slot.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {slot.shape}")
        slot += g

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self, prefix=""):
        return math.sqrt(sum(float(np.sum(g * g)) for n, g in self.grads.items() if n.startswith(prefix)))

    def n_params(self):
        return sum(p.size for p in self.params.values())


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def optimizer_step(store: ParamStore, lr: float, cfg: AdamConfig = AdamConfig()):
    """One Adam update over every non-frozen parameter, then zero all gradients."""
    store.step += 1
    t = store.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        if name in store.frozen:
            continue
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = store.m[name]
        v = store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    store.zero_grad()
    return store


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    kinks: dict = field(default_factory=dict)
    h: float = 1e-5
    tol: float = 1e-4
    loss: float = float("nan")

    @property
    def passed(self):
        return not self.kinks and all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def offenders(self):
        bad = {n for n, e in self.max_rel_error.items() if not e <= self.tol}
        return sorted(bad | set(self.kinks))


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn, params, analytic, h=1e-5, tol=1e-4, names=None, kink_tol=1e-2):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the loss using the current contents of ``params``
    (a name -> array mapping perturbed in place and restored); ``analytic``
    maps the same names to gradient arrays.

    The error for a parameter tensor is ``max|a - n| / max(max|a|, max|n|, 1e-8)``:
    entries far below the tensor's own scale sit under the float64
    differencing noise floor (~eps*|f|/h) and cannot be resolved one by one.
    A coordinate whose forward and backward one-sided slopes disagree by more
    than ``kink_tol`` (relative) is reported as a non-differentiable point.
    """
    base = float(loss_fn())
    if not math.isfinite(base):
        raise FloatingPointError(f"loss is not finite at the check point: {base}")
    report = GradCheckReport(h=h, tol=tol, loss=base)
    for name in names if names is not None else list(params):
        p = params[name]
        a = np.asarray(analytic[name], dtype=np.float64).reshape(p.shape)
        num = np.zeros(p.shape)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = float(loss_fn())
            p[idx] = old - h
            fm = float(loss_fn())
            p[idx] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                num[idx] = float("inf")
                continue
            num[idx] = (fp - fm) / (2.0 * h)
            fwd, bwd = (fp - base) / h, (base - fm) / h
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
                report.kinks.setdefault(name, []).append(idx)
        if not np.all(np.isfinite(num)):
            report.max_rel_error[name] = float("inf")
            continue
        scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(num), initial=0.0)), 1e-8)
        report.max_rel_error[name] = float(np.max(np.abs(a - num), initial=0.0)) / scale
    return report
