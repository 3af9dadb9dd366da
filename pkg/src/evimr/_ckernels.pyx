# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, sin, fabs, M_PI

cnp.import_array()

cdef double _G = 7.0
cdef double[9] _COEF = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
]
cdef double _HALF_LOG_2PI = 0.91893853320467274178


cdef double _lgamma(double x) nogil:
    cdef double a, t
    cdef int i
    if x < 0.5:
        return log(M_PI / fabs(sin(M_PI * x))) - _lgamma(1.0 - x)
    x -= 1.0
    a = _COEF[0]
    for i in range(1, 9):
        a += _COEF[i] / (x + i)
    t = x + _G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * log(t) - t + log(a)


cdef double _digamma(double x) nogil:
    cdef double acc = 0.0, inv, inv2, series
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    return acc + log(x) - 0.5 * inv - series


def lgamma(double x):
    return _lgamma(x)


def digamma(double x):
    return _digamma(x)


def _flat(v, shape):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=np.float64), shape)).ravel()


def nig_nll(b, gamma, upsilon, alpha, beta):
    shape = np.broadcast_shapes(np.shape(b), np.shape(gamma), np.shape(upsilon),
                                np.shape(alpha), np.shape(beta))
    cdef const double[::1] bb = _flat(b, shape)
    cdef const double[::1] gg = _flat(gamma, shape)
    cdef const double[::1] uu = _flat(upsilon, shape)
    cdef const double[::1] aa = _flat(alpha, shape)
    cdef const double[::1] be = _flat(beta, shape)
    cdef Py_ssize_t n = bb.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double omega, r
    with nogil:
        for i in range(n):
            omega = 2.0 * be[i] * (1.0 + uu[i])
            r = bb[i] - gg[i]
            o[i] = (0.5 * log(M_PI / uu[i]) - aa[i] * log(omega)
                    + (aa[i] + 0.5) * log(uu[i] * r * r + omega)
                    + _lgamma(aa[i]) - _lgamma(aa[i] + 0.5))
    return out.reshape(shape)


def nig_nll_grad(b, gamma, upsilon, alpha, beta):
    shape = np.broadcast_shapes(np.shape(b), np.shape(gamma), np.shape(upsilon),
                                np.shape(alpha), np.shape(beta))
    cdef const double[::1] bb = _flat(b, shape)
    cdef const double[::1] gg = _flat(gamma, shape)
    cdef const double[::1] uu = _flat(upsilon, shape)
    cdef const double[::1] aa = _flat(alpha, shape)
    cdef const double[::1] be = _flat(beta, shape)
    cdef Py_ssize_t n = bb.shape[0], i
    dg = np.empty(n, dtype=np.float64)
    du = np.empty(n, dtype=np.float64)
    da = np.empty(n, dtype=np.float64)
    db = np.empty(n, dtype=np.float64)
    cdef double[::1] odg = dg, odu = du, oda = da, odb = db
    cdef double omega, r, s, ap
    with nogil:
        for i in range(n):
            omega = 2.0 * be[i] * (1.0 + uu[i])
            r = bb[i] - gg[i]
            s = uu[i] * r * r + omega
            ap = aa[i] + 0.5
            odg[i] = -2.0 * ap * uu[i] * r / s
            odu[i] = -0.5 / uu[i] - aa[i] / (1.0 + uu[i]) + ap * (r * r + 2.0 * be[i]) / s
            oda[i] = log(s) - log(omega) + _digamma(aa[i]) - _digamma(ap)
            odb[i] = -aa[i] / be[i] + ap * 2.0 * (1.0 + uu[i]) / s
    return dg.reshape(shape), du.reshape(shape), da.reshape(shape), db.reshape(shape)


cdef inline double _iou(double s0, double e0, double s1, double e1) nogil:
    cdef double inter = (e0 if e0 < e1 else e1) - (s0 if s0 > s1 else s1)
    cdef double union
    if inter < 0.0:
        inter = 0.0
    union = (e0 - s0) + (e1 - s1) - inter
    if union <= 0.0:
        return 1.0 if (s0 == s1 and e0 == e1) else 0.0
    return inter / union


def iou_1d(double s0, double e0, double s1, double e1):
    return _iou(s0, e0, s1, e1)


def nms(starts, ends, scores, double threshold):
    cdef const double[::1] st = np.ascontiguousarray(starts, dtype=np.float64)
    cdef const double[::1] en = np.ascontiguousarray(ends, dtype=np.float64)
    sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = sc.shape[0]
    cdef cnp.int64_t[::1] order = np.lexsort((np.arange(n), -sc)).astype(np.int64)
    kept_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] kept = kept_arr
    cdef Py_ssize_t n_kept = 0, a, k, i
    cdef bint ok
    with nogil:
        for a in range(n):
            i = order[a]
            ok = True
            for k in range(n_kept):
                if _iou(st[i], en[i], st[kept[k]], en[kept[k]]) > threshold:
                    ok = False
                    break
            if ok:
                kept[n_kept] = i
                n_kept += 1
    return kept_arr[:n_kept].copy()


def envelope_ap(tp, int n_gt):
    cdef const double[::1] t = np.ascontiguousarray(tp, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], k
    if n_gt <= 0 or n == 0:
        return 0.0
    prec_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] prec = prec_arr
    cdef double ctp = 0.0, best = 0.0, area = 0.0
    with nogil:
        for k in range(n):
            ctp += t[k]
            prec[k] = ctp / (k + 1)
        for k in range(n - 1, -1, -1):
            if prec[k] > best:
                best = prec[k]
            area += best * t[k]
    return area / n_gt
