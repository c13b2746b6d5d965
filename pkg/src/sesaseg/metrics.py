"""Evaluation metrics for LA segmentation and surface scar quantification."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .distance import boundary_set, squared_edt
from .errors import EmptyClassError, GridMismatchError, SesaError
from .surface import hard_boundary_mask, project_volume_labels, wall_ring

CSV_COLUMNS = (
    "case_id", "dice_la", "asd_mm", "hd_mm", "accuracy", "dice_s", "dice_g",
    "sensitivity", "specificity",
)


@dataclass
class MetricsReport:
    case_id: str
    dice_la: float
    asd_mm: float
    hd_mm: float
    accuracy: float
    dice_s: float
    dice_g: float
    sensitivity: float
    specificity: float

    def row(self):
        d = asdict(self)
        return [d[c] if c == "case_id" else repr(float(d[c])) for c in CSV_COLUMNS]


def _ratio(num, den, empty=1.0):
    return empty if den == 0 else num / den


def dice_overlap(a, b):
    """``2|A & B| / (|A| + |B|)``; 1 when both masks are empty."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise GridMismatchError(f"grid {a.shape} != {b.shape}")
    return _ratio(2.0 * np.count_nonzero(a & b), np.count_nonzero(a) + np.count_nonzero(b))


def directed_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Distances (mm) from each boundary voxel of ``a`` to the boundary of ``b``."""
    sa = boundary_set(np.asarray(a) > 0)
    sb = boundary_set(np.asarray(b) > 0)
    if not sa.any() or not sb.any():
        raise EmptyClassError("surface distances need two non-empty labels")
    return np.sqrt(squared_edt(sb, spacing)[sa])


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0), percentile=100.0):
    """Average symmetric surface distance and Hausdorff distance, in mm.

    ASD is the mean of the two directed mean distances. HD is the larger of
    the two directed ``percentile``-th percentiles (100 = classic HD).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GridMismatchError(f"grid {a.shape} != {b.shape}")
    d_ab = directed_surface_distances(a, b, spacing)
    d_ba = directed_surface_distances(b, a, spacing)
    asd = 0.5 * (math.fsum(d_ab) / d_ab.size + math.fsum(d_ba) / d_ba.size)
    if percentile >= 100:
        hd = max(float(d_ab.max()), float(d_ba.max()))
    else:
        hd = max(float(np.percentile(d_ab, percentile)), float(np.percentile(d_ba, percentile)))
    return asd, hd


def surface_scar_metrics(pred, gt):
    """``(accuracy, dice_s, dice_g, sensitivity, specificity)`` with scar positive.

    Both labelings must live on the same point set.
    """
    if pred.points.shape != gt.points.shape or not np.array_equal(pred.points, gt.points):
        raise GridMismatchError("labeled surfaces are on different point sets")
    p = np.asarray(pred.scar, dtype=bool)
    g = np.asarray(gt.scar, dtype=bool)
    n = p.size
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    n_ps, n_gs = int(p.sum()), int(g.sum())
    n_pn, n_gn = n - n_ps, n - n_gs
    accuracy = _ratio(tp + tn, n)
    dice_s = _ratio(2.0 * tp, n_ps + n_gs)
    dice_g = _ratio(2.0 * (tp + tn), (n_ps + n_gs) + (n_pn + n_gn))
    sensitivity = _ratio(tp, n_gs)
    specificity = _ratio(tn, n_gn)
    return accuracy, dice_s, dice_g, sensitivity, specificity


def otsu_threshold(samples, bins=256):
    """Threshold maximising between-class variance of a ``bins``-bin histogram.

    When several cut points share the maximum (empty bins between the modes),
    the midpoint of the first and last is returned.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or x.min() == x.max():
        raise SesaError("Otsu threshold needs at least two distinct values")
    hist, edges = np.histogram(x, bins=bins, range=(x.min(), x.max()))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = x.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    total = np.sum(hist * centers)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = s0 / w0
        mu1 = (total - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    best = np.flatnonzero(between == between.max())
    return 0.5 * (edges[best[0] + 1] + edges[best[-1] + 1])


def otsu_scar_labels(intensity, la_label, wall_thickness=2):
    """Otsu baseline: threshold the wall-ring intensities into normal (1) / scar (2)."""
    img = np.asarray(intensity, dtype=np.float64)
    ring = wall_ring(la_label, wall_thickness)
    if not ring.any():
        raise EmptyClassError("LA label has no wall ring")
    thr = otsu_threshold(img[ring])
    out = np.zeros(img.shape)
    out[ring] = np.where(img[ring] > thr, 2.0, 1.0)
    return out


def evaluate_case(case_id, pred_la, pred_scar_labels, gt_la, gt_labels,
                  spacing=(1.0, 1.0, 1.0), radius=3.0, percentile=100.0, surface_from="gt"):
    """Full per-case report.

    Scar labels of both prediction and ground truth ({0,1,2} volumes) are
    projected onto one reference surface before comparison: the boundary of
    the ground-truth LA by default, or of the predicted LA.
    """
    if surface_from not in ("gt", "pred"):
        raise SesaError(f"surface_from must be 'gt' or 'pred', got {surface_from!r}")
    pred_la = np.asarray(pred_la) > 0
    gt_la = np.asarray(gt_la) > 0
    dice_la = dice_overlap(pred_la, gt_la)
    if pred_la.any() and not pred_la.all():
        asd, hd = surface_distances(pred_la, gt_la, spacing, percentile)
    else:
        asd = hd = float("inf")
    reference = hard_boundary_mask(gt_la if surface_from == "gt" else pred_la)
    gt_surface = project_volume_labels(gt_labels, reference, radius)
    pred_surface = project_volume_labels(pred_scar_labels, reference, radius)
    return MetricsReport(case_id, dice_la, asd, hd, *surface_scar_metrics(pred_surface, gt_surface))
