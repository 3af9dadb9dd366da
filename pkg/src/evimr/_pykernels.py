"""Pure-Python / numpy implementations of the scalar hot kernels.

These mirror ``_ckernels.pyx`` one-to-one and are used whenever the compiled
extension is unavailable (or ``EVIMR_PURE_PYTHON=1`` is set).
"""

import math

import numpy as np

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def lgamma(x):
    """Log-gamma via the Lanczos approximation (g=7, n=9), with reflection below 1/2."""
    if x < 0.5:
        return math.log(math.pi / abs(math.sin(math.pi * x))) - lgamma(1.0 - x)
    x -= 1.0
    a = _LANCZOS_COEF[0]
    for i in range(1, 9):
        a += _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(a)


def digamma(x):
    """Digamma for x > 0: upward recurrence to x >= 6, then the asymptotic series."""
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    return acc + math.log(x) - 0.5 * inv - series


def _lgamma_vec(x):
    x = np.asarray(x, dtype=np.float64)
    xm = x - 1.0
    a = np.full_like(xm, _LANCZOS_COEF[0])
    for i in range(1, 9):
        a = a + _LANCZOS_COEF[i] / (xm + i)
    t = xm + _LANCZOS_G + 0.5
    out = _HALF_LOG_2PI + (xm + 0.5) * np.log(t) - t + np.log(a)
    small = x < 0.5
    if np.any(small):
        out[small] = [lgamma(float(v)) for v in x[small]]
    return out


def _digamma_vec(x):
    # x > 0, so six recurrence steps always reach the asymptotic regime
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    for _ in range(6):
        low = x < 6.0
        if not np.any(low):
            break
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    return acc + np.log(x) - 0.5 * inv - series


def nig_nll(b, gamma, upsilon, alpha, beta):
    """Elementwise Student-t negative log-likelihood of ``b`` under NIG parameters."""
    b, gamma, upsilon, alpha, beta = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (b, gamma, upsilon, alpha, beta)))
    omega = 2.0 * beta * (1.0 + upsilon)
    r = b - gamma
    return (0.5 * np.log(np.pi / upsilon)
            - alpha * np.log(omega)
            + (alpha + 0.5) * np.log(upsilon * r * r + omega)
            + _lgamma_vec(alpha) - _lgamma_vec(alpha + 0.5))


def nig_nll_grad(b, gamma, upsilon, alpha, beta):
    """Partial derivatives of :func:`nig_nll` w.r.t. (gamma, upsilon, alpha, beta)."""
    b, gamma, upsilon, alpha, beta = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (b, gamma, upsilon, alpha, beta)))
    omega = 2.0 * beta * (1.0 + upsilon)
    r = b - gamma
    s = upsilon * r * r + omega
    ap = alpha + 0.5
    d_gamma = -2.0 * ap * upsilon * r / s
    d_upsilon = -0.5 / upsilon - alpha / (1.0 + upsilon) + ap * (r * r + 2.0 * beta) / s
    d_alpha = np.log(s) - np.log(omega) + _digamma_vec(alpha) - _digamma_vec(ap)
    d_beta = -alpha / beta + ap * 2.0 * (1.0 + upsilon) / s
    return d_gamma, d_upsilon, d_alpha, d_beta


def iou_1d(s0, e0, s1, e1):
    inter = min(e0, e1) - max(s0, s1)
    if inter < 0.0:
        inter = 0.0
    union = (e0 - s0) + (e1 - s1) - inter
    if union <= 0.0:
        return 1.0 if (s0 == s1 and e0 == e1) else 0.0
    return inter / union


def nms(starts, ends, scores, threshold):
    """Greedy 1-D NMS. Returns kept indices in keep order."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = []
    for i in order:
        s, e = starts[i], ends[i]
        if all(iou_1d(s, e, starts[k], ends[k]) <= threshold for k in kept):
            kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def envelope_ap(tp, n_gt):
    """Area under the interpolated PR curve for a score-ranked TP/FP sequence."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt <= 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope * tp) / n_gt)
