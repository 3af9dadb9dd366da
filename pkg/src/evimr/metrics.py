"""Retrieval metrics and uncertainty diagnostics."""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from evimr import kernels
from evimr.heads import MomentSpan

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_THRESHOLDS = (0.3, 0.5, 0.7)
NMS_THRESHOLD = 0.7


@dataclass(frozen=True)
class Detection:
    span: MomentSpan
    score: float
    source: int = -1  # index of the clip that proposed it

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass
class MetricReport:
    r1_at: dict = field(default_factory=dict)
    map_avg: float = 0.0
    map_at_075: float = 0.0
    miou: float = 0.0

    def to_dict(self):
        return {
            "map_at_075": self.map_at_075,
            "map_avg": self.map_avg,
            "miou": self.miou,
            "r1_at": {f"{k:.2f}": v for k, v in sorted(self.r1_at.items())},
        }


@dataclass
class CalibrationReport:
    spearman_aleatoric: float
    spearman_epistemic: float
    bins: list = field(default_factory=list)

    def to_dict(self):
        return {
            "bins": self.bins,
            "spearman_aleatoric": self.spearman_aleatoric,
            "spearman_epistemic": self.spearman_epistemic,
        }


def iou_1d(a: MomentSpan, b: MomentSpan):
    return kernels.iou_1d(a.start, a.end, b.start, b.end)


def nms(dets, iou_threshold=NMS_THRESHOLD):
    """Greedy NMS: highest score first (ties by input order); keep iff IoU <= threshold with all kept."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"NMS threshold must lie in (0, 1], got {iou_threshold}")
    if not dets:
        return []
    keep = kernels.nms([d.span.start for d in dets], [d.span.end for d in dets],
                       [d.score for d in dets], iou_threshold)
    return [dets[i] for i in keep]


def recall_at_iou(top1, gts, tau):
    """``top1[i]`` is the best detection for sample i (or None for no prediction)."""
    if len(top1) != len(gts):
        raise ValueError("one prediction slot per ground truth")
    if not gts:
        raise ValueError("recall over an empty split is undefined")
    hits = sum(1 for p, g in zip(top1, gts) if p is not None and iou_1d(p.span, g) >= tau)
    return hits / len(gts)


def average_precision(ranked, gts, tau):
    """AP at one IoU threshold over detections pooled across samples.

    ``ranked[i]`` is sample i's detection list. Each sample has a single
    ground truth, so only its first matching detection (in pooled score order)
    is a true positive.
    """
    pooled = [(d.score, i, j, d) for i, dets in enumerate(ranked) for j, d in enumerate(dets)]
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched = set()
    tp = np.zeros(len(pooled))
    for k, (_, i, _, d) in enumerate(pooled):
        if i not in matched and iou_1d(d.span, gts[i]) >= tau:
            matched.add(i)
            tp[k] = 1.0
    return kernels.envelope_ap(tp, len(gts))


def mean_ap(ranked, gts):
    """(mean AP over IoU 0.50:0.05:0.95, AP at 0.75)."""
    aps = {t: average_precision(ranked, gts, t) for t in IOU_THRESHOLDS}
    return float(np.mean(list(aps.values()))), aps[0.75]


def metric_report(ranked, gts):
    top1 = [dets[0] if dets else None for dets in ranked]
    m_avg, m75 = mean_ap(ranked, gts)
    miou = float(np.mean([iou_1d(p.span, g) if p is not None else 0.0 for p, g in zip(top1, gts)]))
    return MetricReport(
        r1_at={t: recall_at_iou(top1, gts, t) for t in RECALL_THRESHOLDS},
        map_avg=m_avg, map_at_075=m75, miou=miou,
    )


def spearman_error_uncertainty(errors, uncertainties):
    x = np.asarray(errors, dtype=np.float64)
    y = np.asarray(uncertainties, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise ValueError("Spearman correlation needs at least 3 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))


def calibration_report(errors, aleatoric, epistemic, n_bins=10):
    errors = np.asarray(errors, dtype=np.float64)
    edges = np.quantile(errors, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, errors, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        m = idx == b
        if not np.any(m):
            continue
        bins.append({
            "error_lo": float(edges[b]), "error_hi": float(edges[b + 1]), "count": int(m.sum()),
            "mean_aleatoric": float(np.mean(np.asarray(aleatoric)[m])),
            "mean_epistemic": float(np.mean(np.asarray(epistemic)[m])),
        })
    return CalibrationReport(
        spearman_error_uncertainty(errors, aleatoric),
        spearman_error_uncertainty(errors, epistemic),
        bins,
    )


def population_variance(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean((v - v.mean()) ** 2))


def modality_variance(level_means_vis, level_means_text):
    """Population variance of per-level mean uncertainty for each modality, and their gap."""
    var_vis = population_variance(level_means_vis)
    var_text = population_variance(level_means_text)
    return var_vis, var_text, abs(var_vis - var_text)


def ood_uncertainty_contrast(epistemic_iid, epistemic_ood):
    iid = np.asarray(epistemic_iid, dtype=np.float64)
    ood = np.asarray(epistemic_ood, dtype=np.float64)
    if iid.size == 0 or ood.size == 0:
        raise ValueError("OOD contrast needs non-empty IID and OOD splits")
    return float(ood.mean() / iid.mean())
