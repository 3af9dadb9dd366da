"""Task heads and loss assembly.

Two layers live here:

* a per-sample API (``ClipPrediction``, ``mr_loss``, ``evidential_loss``,
  ``total_loss``) written for readability and used as the reference;
* ``batch_objective``, the vectorized loss with analytic gradients w.r.t. the
  raw head outputs, used for training.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from evimr import kernels
from evimr.evidential import EPS, NIGParams, constrain_batch, constrain_raw_to_nig, sigmoid, softplus, student_t_nll
from evimr.nn import log_softmax_rows, softmax_rows
from evimr.regularizers import NormalizedPair, RegularizerMode, normalize_arrays


@dataclass(frozen=True)
class MomentSpan:
    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError(f"invalid span [{self.start}, {self.end}]")

    @property
    def length(self):
        return self.end - self.start


@dataclass(frozen=True)
class ClipPrediction:
    clip_index: int
    center: float
    foreground_logit: float
    left: float
    right: float
    nig_start: NIGParams
    nig_end: NIGParams

    def span(self):
        return MomentSpan(max(0.0, self.center - self.left), min(1.0, self.center + self.right))


@dataclass(frozen=True)
class MaskedQuery:
    tokens: tuple
    mask_positions: tuple
    targets: tuple

    def __post_init__(self):
        if len(set(self.mask_positions)) != len(self.mask_positions):
            raise ValueError("mask positions must be distinct")
        if len(self.targets) != len(self.mask_positions):
            raise ValueError("one target per masked position")
        if any(not 0 <= p < len(self.tokens) for p in self.mask_positions):
            raise ValueError("mask position out of range")


@dataclass(frozen=True)
class LossWeights:
    lambda_L1: float = 1.0
    lambda_iou: float = 1.0
    lambda_NLL: float = 1.0
    lambda_geom: float = 1e-2
    lambda_Reg: float = 1e-2
    lambda_der: float = 1e-3

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


def clip_centers(n_clips):
    return (np.arange(n_clips) + 0.5) / n_clips


# ---------------------------------------------------------------- per-sample losses

def smooth_l1(pred, target):
    x = abs(pred - target)
    return 0.5 * x * x if x < 1.0 else x - 0.5


def giou_loss_1d(pred: MomentSpan, gt: MomentSpan):
    hull = max(pred.end, gt.end) - min(pred.start, gt.start)
    if hull <= 0.0:
        if pred == gt:
            return 0.0
        raise ValueError("generalized IoU undefined for distinct zero-length spans")
    inter = max(0.0, min(pred.end, gt.end) - max(pred.start, gt.start))
    union = pred.length + gt.length - inter
    iou = inter / union if union > 0 else float(pred == gt)
    return 1.0 - (iou - (hull - union) / hull)


def _bce_with_logits(z, y):
    return float(softplus(z)) - y * z


def mr_loss(preds, gt: MomentSpan, fg_mask, w: LossWeights):
    """Moment-regression loss for one video.

    Regression terms are averaged over foreground clips; the foreground
    classifier's binary cross-entropy is averaged over all clips.
    """
    if len(preds) != len(fg_mask):
        raise ValueError("one foreground flag per clip")
    bce = sum(_bce_with_logits(p.foreground_logit, float(f)) for p, f in zip(preds, fg_mask)) / len(preds)
    reg = []
    for p, f in zip(preds, fg_mask):
        if not f:
            continue
        l1 = smooth_l1(p.left, p.center - gt.start) + smooth_l1(p.right, gt.end - p.center)
        reg.append(w.lambda_L1 * l1 + w.lambda_iou * giou_loss_1d(p.span(), gt))
    return bce + (sum(reg) / len(reg) if reg else 0.0)


def qr_loss(logits, mq: MaskedQuery, vocab_size=None):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[0] != len(mq.targets):
        raise ValueError(f"{logits.shape[0]} logit rows for {len(mq.targets)} masked positions")
    if vocab_size is not None and logits.shape[1] != vocab_size:
        raise ValueError(f"logits cover {logits.shape[1]} tokens, vocabulary has {vocab_size}")
    if not mq.targets:
        return 0.0
    logp = log_softmax_rows(logits)
    return float(-np.mean(logp[np.arange(len(mq.targets)), list(mq.targets)]))


def evidential_loss(b, p: NIGParams, np_pair: NormalizedPair, w: LossWeights, mode, delta=None):
    """Per-observation evidential loss. ``delta`` defaults to |b - gamma| (vanilla mode)."""
    mode = RegularizerMode(mode)
    if mode is RegularizerMode.NONE:
        return 0.0
    nll = w.lambda_NLL * student_t_nll(b, p)
    if mode is RegularizerMode.NLL_ONLY:
        return nll
    if mode is RegularizerMode.VANILLA:
        d = abs(b - p.gamma) if delta is None else delta
        return nll + w.lambda_Reg * d * (2.0 * p.upsilon + p.alpha)
    return nll + w.lambda_geom * (np_pair.delta_bar + np_pair.phi_bar - 1.0) ** 2


def evidential_scale(mode):
    """Averaging numerator: 1/N for the vanilla baseline objective, 2/N otherwise."""
    return 1.0 if RegularizerMode(mode) is RegularizerMode.VANILLA else 2.0


@dataclass
class LossParts:
    mr: float
    evidential_sum: float
    n_clips: int
    qr: float = 0.0
    qr_active: bool = False


def total_loss(parts: LossParts, w: LossWeights, mode):
    if parts.n_clips <= 0:
        raise ValueError("total loss needs at least one supervised clip (N=0)")
    evid = w.lambda_der * evidential_scale(mode) / parts.n_clips * parts.evidential_sum
    return parts.mr + evid + (parts.qr if parts.qr_active else 0.0)


def decode_predictions(fg_logit, offsets, raw_ev):
    """Turn one video's head outputs (L,), (L,2), (L,8) into ``ClipPrediction`` objects."""
    n = len(fg_logit)
    centers = clip_centers(n)
    return [
        ClipPrediction(
            clip_index=i,
            center=float(centers[i]),
            foreground_logit=float(fg_logit[i]),
            left=float(offsets[i, 0]),
            right=float(offsets[i, 1]),
            nig_start=constrain_raw_to_nig(raw_ev[i, :4]),
            nig_end=constrain_raw_to_nig(raw_ev[i, 4:]),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------- batched objective

@dataclass
class Targets:
    """Supervision for a batch of ``B`` videos with ``L`` clips and queries of ``Lq`` tokens."""
    gt: np.ndarray  # (B, 2) start/end in normalized time
    fg_mask: np.ndarray  # (B, L) bool
    qr_batch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    qr_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    qr_target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def foreground_mask(gt, n_clips):
    c = clip_centers(n_clips)
    gt = np.asarray(gt, dtype=np.float64)
    return (c[None, :] >= gt[:, :1]) & (c[None, :] <= gt[:, 1:2])


def _giou_and_grad(ps, pe, gs, ge):
    inter_raw = np.minimum(pe, ge) - np.maximum(ps, gs)
    pos = inter_raw > 0
    inter = np.where(pos, inter_raw, 0.0)
    union = (pe - ps) + (ge - gs) - inter
    hull = np.maximum(pe, ge) - np.minimum(ps, gs)
    loss = 2.0 - inter / union - union / hull
    di_ps = np.where(pos & (ps > gs), -1.0, 0.0)
    di_pe = np.where(pos & (pe < ge), 1.0, 0.0)
    du_ps = -1.0 - di_ps
    du_pe = 1.0 - di_pe
    dh_ps = np.where(ps < gs, -1.0, 0.0)
    dh_pe = np.where(pe > ge, 1.0, 0.0)

    def d(di, du, dh):
        return -((di * union - inter * du) / union ** 2) - ((du * hull - union * dh) / hull ** 2)

    return loss, d(di_ps, du_ps, dh_ps), d(di_pe, du_pe, dh_pe)


def _smooth_l1_and_grad(x):
    ax = np.abs(x)
    quad = ax < 1.0
    return np.where(quad, 0.5 * x * x, ax - 0.5), np.where(quad, x, np.sign(x))


def batch_objective(out, tg: Targets, w: LossWeights, mode, qr_active=False, frozen=None):
    """Loss parts and gradients w.r.t. raw head outputs for one batch.

    ``out`` holds ``fg_logit (B,L)``, ``off_pre (B,L,2)``, ``offset_scale``,
    ``raw_ev (B,L,8)``, ``raw_ev_reg (B,L,8)`` (evidential head applied to
    gradient-stopped features) and ``qr_logits (B,Lq,V)``.

    ``frozen`` optionally supplies the regularizer's stop-gradient statistics
    (``delta`` per observation and the batch maxima); when omitted they are
    computed here and returned so a finite-difference check can reuse them.
    """
    mode = RegularizerMode(mode)
    fg_logit = out["fg_logit"]
    B, L = fg_logit.shape
    grads = {}
    parts = {}

    # foreground classifier
    y = tg.fg_mask.astype(np.float64)
    parts["bce"] = float(np.mean(softplus(fg_logit) - y * fg_logit))
    grads["fg_logit"] = (sigmoid(fg_logit) - y) / (B * L)

    # boundary regression on foreground clips
    bi, ci = np.nonzero(tg.fg_mask)
    F = len(bi)
    scale = out["offset_scale"]
    off_pre = out["off_pre"]
    d_off_pre = np.zeros_like(off_pre)
    centers = clip_centers(L)[ci]
    gs, ge = tg.gt[bi, 0], tg.gt[bi, 1]
    if F:
        pre = off_pre[bi, ci]
        off = scale * softplus(pre)
        left, right = off[:, 0], off[:, 1]
        l1_l, g_l = _smooth_l1_and_grad(left - (centers - gs))
        l1_r, g_r = _smooth_l1_and_grad(right - (ge - centers))
        ps_raw, pe_raw = centers - left, centers + right
        ps, pe = np.maximum(ps_raw, 0.0), np.minimum(pe_raw, 1.0)
        giou, d_ps, d_pe = _giou_and_grad(ps, pe, gs, ge)
        parts["l1"] = float(np.sum(l1_l + l1_r) / F)
        parts["giou"] = float(np.sum(giou) / F)
        d_left = (w.lambda_L1 * g_l - w.lambda_iou * d_ps * (ps_raw > 0)) / F
        d_right = (w.lambda_L1 * g_r + w.lambda_iou * d_pe * (pe_raw < 1)) / F
        d_off = np.stack([d_left, d_right], axis=-1)
        d_off_pre[bi, ci] = d_off * scale * sigmoid(pre)
    else:
        parts["l1"] = parts["giou"] = 0.0
    grads["off_pre"] = d_off_pre
    parts["mr"] = parts["bce"] + w.lambda_L1 * parts["l1"] + w.lambda_iou * parts["giou"]

    # evidential head
    raw_ev = out["raw_ev"].reshape(B, L, 2, 4)
    raw_reg = out["raw_ev_reg"].reshape(B, L, 2, 4)
    d_raw = np.zeros_like(raw_ev)
    d_raw_reg = np.zeros_like(raw_reg)
    new_frozen = {"delta": [], "delta_max": [], "phi_max": []}
    nll_sum = reg_sum = 0.0
    if mode is not RegularizerMode.NONE:
        if F == 0:
            raise ValueError("total loss needs at least one supervised clip (N=0)")
        coef = w.lambda_der * evidential_scale(mode) / F
        for k in range(2):
            b = tg.gt[bi, k]
            (g, u, a, be), jac = constrain_batch(raw_ev[bi, ci, k])
            nll = kernels.nig_nll(b, g, u, a, be)
            dn = np.stack(kernels.nig_nll_grad(b, g, u, a, be), axis=-1) * jac
            nll_sum += float(np.sum(nll))
            d_raw[bi, ci, k] = coef * w.lambda_NLL * dn
            if mode is RegularizerMode.NLL_ONLY:
                continue
            (g_r, u_r, a_r, _), jac_r = constrain_batch(raw_reg[bi, ci, k])
            delta = np.abs(b - g_r) if frozen is None else frozen["delta"][k]
            phi = 2.0 * u_r + a_r
            if mode is RegularizerMode.VANILLA:
                reg = w.lambda_Reg * delta * phi
                d_phi = w.lambda_Reg * delta
                dmax = pmax = float("nan")
            else:
                dmax = None if frozen is None else frozen["delta_max"][k]
                pmax = None if frozen is None else frozen["phi_max"][k]
                d_bar, p_bar, dmax, pmax = normalize_arrays(delta, phi, dmax, pmax)
                r = d_bar + p_bar - 1.0
                reg = w.lambda_geom * r * r
                d_phi = w.lambda_geom * 2.0 * r / (pmax + EPS)
            new_frozen["delta"].append(delta)
            new_frozen["delta_max"].append(dmax)
            new_frozen["phi_max"].append(pmax)
            reg_sum += float(np.sum(reg))
            d_raw_reg[bi, ci, k, 1] = coef * d_phi * 2.0 * jac_r[:, 1]
            d_raw_reg[bi, ci, k, 2] = coef * d_phi * jac_r[:, 2]
    parts["nll"] = nll_sum / max(F, 1)
    parts["reg"] = reg_sum / max(F, 1)
    grads["raw_ev"] = d_raw.reshape(B, L, 8)
    grads["raw_ev_reg"] = d_raw_reg.reshape(B, L, 8)

    # query reconstruction
    M = len(tg.qr_target)
    d_qr = np.zeros_like(out["qr_logits"]) if "qr_logits" in out else None
    parts["qr"] = 0.0
    if qr_active and M:
        logits = out["qr_logits"][tg.qr_batch, tg.qr_pos]
        logp = log_softmax_rows(logits)
        parts["qr"] = float(-np.mean(logp[np.arange(M), tg.qr_target]))
        dl = softmax_rows(logits)
        dl[np.arange(M), tg.qr_target] -= 1.0
        np.add.at(d_qr, (tg.qr_batch, tg.qr_pos), dl / M)
    grads["qr_logits"] = d_qr

    evid_sum = w.lambda_NLL * nll_sum + reg_sum
    parts["evidential"] = (w.lambda_der * evidential_scale(mode) / F * evid_sum
                           if mode is not RegularizerMode.NONE else 0.0)
    parts["total"] = total_loss(LossParts(parts["mr"], evid_sum, max(F, 1), parts["qr"], qr_active), w, mode)
    parts["n_fg"] = F
    return parts, grads, new_frozen
