"""Objective terms of the joint LA / scar problem, each with its exact gradient.

All terms are plain sums over voxels unless ``mean=True`` divides by the
voxel count. Every function returns the value first and per-voxel
gradients with respect to the predictions after it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, GridMismatchError, SesaError
from .surface import soft_boundary_mask, soft_boundary_mask_vjp

EPS = 1e-7
DICE_SMOOTH = 1.0
ARMS = ("bce", "se", "sesa")


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _same_grid(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise GridMismatchError(f"grid {a.shape} != {shape}")


def _norm(n, mean):
    return float(n) if mean else 1.0


def bce(pred, target, eps=EPS, mean=False):
    """Negated Bernoulli log-likelihood, ``-sum(y log p + (1-y) log(1-p))``.

    ``pred`` is clamped to ``[eps, 1-eps]``; the gradient is zero where the
    clamp is active.
    """
    p = _arr(pred)
    y = _arr(target)
    _same_grid(p, y)
    if p.min() < 0 or p.max() > 1:
        raise SesaError("predictions must lie in [0, 1]")
    pc = np.clip(p, eps, 1 - eps)
    n = _norm(p.size, mean)
    value = -np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)) / n
    grad = (-(y / pc) + (1 - y) / (1 - pc)) / n
    grad = np.where((p < eps) | (p > 1 - eps), 0.0, grad)
    return float(value), grad


def se_la(pred, dtm, t_la=0.5, mean=False):
    """Distance-weighted LA term ``sum((p - t_la) * phi)``; linear in ``pred``."""
    p = _arr(pred)
    phi = _arr(dtm)
    _same_grid(p, phi)
    n = _norm(p.size, mean)
    return float(np.sum((p - t_la) * phi) / n), phi / n


def _channels(dpm):
    return _arr(dpm.p_normal), _arr(dpm.p_scar)


def se_scar(dpm_pred, dpm_target, metric="l2", mean=False):
    """Discrepancy between predicted and target DPMs over both channels.

    Returns ``(value, (grad_normal, grad_scar))``.
    """
    pn, ps = _channels(dpm_pred)
    tn, ts = _channels(dpm_target)
    _same_grid(pn, ps, tn, ts)
    n = _norm(pn.size, mean)
    if metric == "l2":
        value = np.sum((pn - tn) ** 2) + np.sum((ps - ts) ** 2)
        grads = (2 * (pn - tn), 2 * (ps - ts))
    elif metric == "hellinger":
        if pn.min() <= 0 or ps.min() <= 0:
            raise SesaError("Hellinger discrepancy needs strictly positive predictions")
        if tn.min() < 0 or ts.min() < 0:
            raise SesaError("target probabilities must be non-negative")
        value = np.sum((np.sqrt(pn) - np.sqrt(tn)) ** 2) + np.sum((np.sqrt(ps) - np.sqrt(ts)) ** 2)
        grads = (1 - np.sqrt(tn / pn), 1 - np.sqrt(ts / ps))
    else:
        raise SesaError(f"unknown metric {metric!r}; use 'l2' or 'hellinger'")
    return float(value / n), (grads[0] / n, grads[1] / n)


def sa(dpm_pred, dpm_target, mask, mean=False):
    """Masked squared error of the channel difference ``p_normal - p_scar``.

    Returns ``(value, (grad_normal, grad_scar, grad_mask))``.
    """
    pn, ps = _channels(dpm_pred)
    tn, ts = _channels(dpm_target)
    m = _arr(mask)
    _same_grid(pn, ps, tn, ts, m)
    n = _norm(pn.size, mean)
    diff = (pn - ps) - (tn - ts)
    value = np.sum((m * diff) ** 2)
    g = 2 * m * m * diff
    return float(value / n), (g / n, -g / n, 2 * m * diff * diff / n)


def dice_loss(pred, target, smooth=DICE_SMOOTH):
    """Soft Dice loss ``1 - 2 sum(p y) / (sum p + sum y + smooth)``."""
    p = _arr(pred)
    y = _arr(target)
    _same_grid(p, y)
    if p.min() < 0 or p.max() > 1:
        raise SesaError("predictions must lie in [0, 1]")
    inter = np.sum(p * y)
    union = np.sum(p) + np.sum(y) + smooth
    value = 1 - 2 * inter / union
    grad = -2 * (y * union - inter) / union**2
    return float(value), grad


@dataclass(frozen=True)
class Weights:
    """Balancing weights; ``la`` and ``m2`` grow by ``growth`` every ``every`` iterations."""

    la: float = 0.01
    scar: float = 10.0
    m1: float = 0.01
    m2: float = 0.001
    growth: float = 1.1
    every: int = 200

    def __post_init__(self):
        for name in ("la", "scar", "m1", "m2"):
            if getattr(self, name) < 0:
                raise SesaError(f"weight {name} must be non-negative")
        if self.growth < 1 or self.every < 1:
            raise SesaError("schedule must be non-decreasing with a positive period")

    def at(self, iteration):
        """Weights in effect at ``iteration`` (0-based)."""
        factor = self.growth ** (iteration // self.every)
        return replace(self, la=self.la * factor, m2=self.m2 * factor)

    @classmethod
    def parse(cls, text, **kwargs):
        """Parse ``"la=0.01,scar=10,m1=0.01,m2=0.001"`` (any subset)."""
        values = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            if key not in ("la", "scar", "m1", "m2"):
                raise SesaError(f"unknown weight {key!r}")
            values[key] = float(val)
        return cls(**values, **kwargs)

    def as_dict(self):
        return {"la": self.la, "scar": self.scar, "m1": self.m1, "m2": self.m2}


@dataclass(frozen=True, eq=False)
class Targets:
    la_label: np.ndarray
    la_dtm: np.ndarray
    dpm_target: object
    m1: np.ndarray
    wall_scar_label: np.ndarray | None = None


@dataclass(eq=False)
class LossReport:
    bce_la: float
    se_la: float
    se_scar: float
    sa_m1: float
    sa_m2: float
    total: float
    grad_la: np.ndarray
    grad_normal: np.ndarray
    grad_scar: np.ndarray
    weights: dict
    bce_scar: float = 0.0
    extras: dict = field(default_factory=dict)

    def terms(self):
        return {
            "bce_la": self.bce_la,
            "se_la": self.se_la,
            "se_scar": self.se_scar,
            "sa_m1": self.sa_m1,
            "sa_m2": self.sa_m2,
            "bce_scar": self.bce_scar,
            "total": self.total,
        }


def arm_weights(weights, arm):
    """Effective weights for an ablation arm as a plain dict."""
    if arm not in ARMS:
        raise SesaError(f"unknown arm {arm!r}; choose from {ARMS}")
    w = weights.as_dict()
    if arm == "bce":
        w.update(la=0.0, scar=0.0, m1=0.0, m2=0.0)
    elif arm == "se":
        w.update(m1=0.0, m2=0.0)
    return w


def total_loss(pred_la, dpm_pred, targets, weights, m2_mode="differentiable", arm="sesa",
               metric="l2", t_la=0.5, mean=False):
    """Assemble the joint objective and its gradients.

    Arms: ``sesa`` uses every term; ``se`` drops both shape-attention terms;
    ``bce`` trains LA with BCE only and the scar head with BCE against the
    binary wall/scar labels (reported as ``bce_scar``, weight 1).
    """
    if m2_mode not in ("differentiable", "stop_gradient"):
        raise SesaError(f"unknown m2_mode {m2_mode!r}")
    w = arm_weights(weights, arm)
    y_hat = _arr(pred_la)
    _same_grid(y_hat, _arr(targets.la_label), _arr(dpm_pred.p_normal))

    v_bce, g_la = bce(y_hat, targets.la_label, mean=mean)
    v_se, g_se = se_la(y_hat, targets.la_dtm, t_la, mean=mean)
    v_scar, (g_n_scar, g_s_scar) = se_scar(dpm_pred, targets.dpm_target, metric, mean=mean)
    v_m1, (g_n_m1, g_s_m1, _) = sa(dpm_pred, targets.dpm_target, targets.m1, mean=mean)

    grad_la = g_la + w["la"] * g_se
    grad_n = w["scar"] * g_n_scar + w["m1"] * g_n_m1
    grad_s = w["scar"] * g_s_scar + w["m1"] * g_s_m1

    v_m2 = 0.0
    try:
        m2 = soft_boundary_mask(y_hat) if w["m2"] > 0 else None
    except DegenerateInputError:
        # a constant LA map has no boundary, so the predicted mask is empty
        m2 = None
    if m2 is not None:
        v_m2, (g_n_m2, g_s_m2, g_mask) = sa(dpm_pred, targets.dpm_target, m2.mask, mean=mean)
        grad_n = grad_n + w["m2"] * g_n_m2
        grad_s = grad_s + w["m2"] * g_s_m2
        if m2_mode == "differentiable":
            grad_la = grad_la + w["m2"] * soft_boundary_mask_vjp(y_hat, g_mask)

    v_bce_scar = 0.0
    if arm == "bce":
        if targets.wall_scar_label is None:
            raise SesaError("the bce arm needs the wall/scar label for binary scar targets")
        lab = _arr(targets.wall_scar_label)
        vn, gn = bce(dpm_pred.p_normal, lab == 1, mean=mean)
        vs, gs = bce(dpm_pred.p_scar, lab == 2, mean=mean)
        v_bce_scar = vn + vs
        grad_n = grad_n + gn
        grad_s = grad_s + gs

    total = (v_bce + w["la"] * v_se + w["scar"] * v_scar + w["m1"] * v_m1 + w["m2"] * v_m2
             + v_bce_scar)
    return LossReport(v_bce, v_se, v_scar, v_m1, v_m2, float(total), grad_la, grad_n, grad_s,
                      w, v_bce_scar)
