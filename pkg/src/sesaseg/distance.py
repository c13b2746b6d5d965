"""Signed Euclidean distance transforms and distance probability maps.

The boundary set ``S`` of a binary label is the set of foreground voxels
with at least one background voxel among their six face neighbours (voxels
outside the grid are not neighbours). Every voxel is measured to the
nearest voxel centre in ``S``; foreground voxels not in ``S`` get a negative
sign, background voxels a positive one, and ``S`` itself zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EmptyClassError, GridMismatchError, SesaError

DPM_VARIANTS = ("exp", "expit", "exp_normalized", "expit_normalized")
_VARIANT_ALIASES = {"exp-norm": "exp_normalized", "expit-norm": "expit_normalized"}


def _binary(label):
    arr = np.asarray(label)
    if not np.isin(arr, (0, 1)).all():
        raise SesaError("label must be binary {0, 1}")
    return arr.astype(bool)


def boundary_set(label):
    """Foreground voxels with a background face neighbour."""
    fg = _binary(label)
    bg = ~fg
    touch = np.zeros_like(fg)
    for ax in range(3):
        n = fg.shape[ax]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        touch[lo] |= bg[hi]
        touch[hi] |= bg[lo]
    return fg & touch


def _envelope_pass(f, step):
    """Exact 1-D squared-distance pass along the last axis of ``f``.

    Computes ``min_q f[..., q] + (step * (p - q))**2`` for every ``p`` with the
    lower envelope of parabolas (Felzenszwalb & Huttenlocher), run on all
    lines at once. ``f`` may hold ``inf`` for "no seed".
    """
    shape = f.shape
    n = shape[-1]
    f = f.reshape(-1, n)
    lines = f.shape[0]
    rows = np.arange(lines)
    v = np.zeros((lines, n), dtype=np.int64)
    z = np.full((lines, n + 1), np.inf)
    top = np.full(lines, -1, dtype=np.int64)
    height = f + (step * np.arange(n)) ** 2

    def crossing(q, r):
        # rows without a seed at q produce nan/inf here; they are masked by the caller
        with np.errstate(invalid="ignore", divide="ignore"):
            return (height[:, q] - height[rows, r]) / (2.0 * step * step * (q - r))

    for q in range(n):
        active = np.isfinite(f[:, q])
        if not active.any():
            continue
        while True:
            live = active & (top >= 0)
            kk = np.maximum(top, 0)
            s = crossing(q, v[rows, kk])
            pop = live & (s <= z[rows, kk])
            if not pop.any():
                break
            top[pop] -= 1
        live = active & (top >= 0)
        s = crossing(q, v[rows, np.maximum(top, 0)])
        top[active] += 1
        idx = rows[active]
        v[idx, top[idx]] = q
        z[idx, top[idx]] = np.where(live[idx], s[idx], -np.inf)
        z[idx, top[idx] + 1] = np.inf

    out = np.full((lines, n), np.inf)
    seeded = top >= 0
    if seeded.any():
        k = np.zeros(lines, dtype=np.int64)
        for p in range(n):
            while True:
                adv = seeded & (k < top) & (z[rows, k + 1] < p)
                if not adv.any():
                    break
                k[adv] += 1
            # neighbours guard against rounding in the crossing points
            best = np.full(lines, np.inf)
            for dk in (-1, 0, 1):
                kk = np.clip(k + dk, 0, np.maximum(top, 0))
                q = v[rows, kk]
                val = f[rows, q] + (step * (p - q)) ** 2
                best = np.minimum(best, val)
            out[seeded, p] = best[seeded]
    return out.reshape(shape)


def squared_edt(seeds, spacing=(1.0, 1.0, 1.0)):
    """Squared Euclidean distance from every voxel to the nearest seed voxel.

    Passes run x, y, z in that order so the per-axis terms are summed in the
    same order as a direct ``dx**2 + dy**2 + dz**2`` evaluation.
    """
    seeds = np.asarray(seeds, dtype=bool)
    dist = np.where(seeds, 0.0, np.inf)
    for ax in range(3):
        moved = np.moveaxis(dist, ax, -1)
        dist = np.moveaxis(_envelope_pass(np.ascontiguousarray(moved), float(spacing[ax])), -1, ax)
    return dist


@dataclass(frozen=True, eq=False)
class SignedDistanceMap:
    """Per-voxel signed distance ``sign * min(d, clip) ** beta``.

    ``squared`` keeps the unclipped squared distances ``d**2`` the values
    were derived from.
    """

    values: np.ndarray
    beta: float
    clip: float
    spacing: tuple
    squared: np.ndarray | None = None

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


def _check_params(beta, clip):
    if not beta > 0:
        raise SesaError(f"beta must be positive, got {beta}")
    if not clip > 0:
        raise SesaError(f"clip must be positive, got {clip}")


def _spacing_for(volume, spacing_aware):
    if spacing_aware:
        return tuple(float(s) for s in getattr(volume, "spacing", (1.0, 1.0, 1.0)))
    return (1.0, 1.0, 1.0)


def signed_edt(label, beta=1.0, clip=50.0, spacing_aware=False):
    """Signed distance transform of a binary label.

    Distances are in voxels unless ``spacing_aware`` is set, in which case
    the label's physical spacing (mm) is used.
    """
    _check_params(beta, clip)
    fg = _binary(label)
    if fg.all() or not fg.any():
        raise EmptyClassError("label needs both foreground and background voxels")
    spacing = _spacing_for(label, spacing_aware)
    surface = boundary_set(fg)
    d2 = squared_edt(surface, spacing)
    magnitude = np.minimum(np.sqrt(d2), clip) ** beta
    sign = np.where(fg, -1.0, 1.0)
    sign[surface] = 0.0
    values = sign * magnitude
    values[surface] = 0.0
    return SignedDistanceMap(values, float(beta), float(clip), spacing, d2)


def class_distance(labels, cls, beta=1.0, clip=50.0, spacing_aware=False):
    """Unsigned distance to the nearest voxel of class ``cls`` (zero on it)."""
    _check_params(beta, clip)
    arr = np.asarray(labels)
    members = arr == cls
    if not members.any():
        raise EmptyClassError(f"class {cls} is empty")
    spacing = _spacing_for(labels, spacing_aware)
    d2 = squared_edt(members, spacing)
    values = np.minimum(np.sqrt(d2), clip) ** beta
    return SignedDistanceMap(values, float(beta), float(clip), spacing, d2)


def dual_class_dtm(labels, beta=1.0, clip=50.0, spacing_aware=False):
    """Distance maps to the normal wall (class 1) and to scar (class 2)."""
    arr = np.asarray(labels)
    if not np.isin(arr, (0, 1, 2)).all():
        raise SesaError("scar label must use alphabet {0, 1, 2}")
    wall = class_distance(labels, 1, beta, clip, spacing_aware)
    scar = class_distance(labels, 2, beta, clip, spacing_aware)
    return wall, scar


@dataclass(frozen=True, eq=False)
class DistanceProbabilityMap:
    p_normal: np.ndarray
    p_scar: np.ndarray
    variant: str = "exp"
    p_background: np.ndarray | None = None

    def __post_init__(self):
        if np.shape(self.p_normal) != np.shape(self.p_scar):
            raise GridMismatchError("p_normal and p_scar grids differ")

    @property
    def shape(self):
        return np.shape(self.p_normal)

    def scaled(self, factor):
        return DistanceProbabilityMap(self.p_normal * factor, self.p_scar * factor, self.variant)


def normalize_variant(variant):
    variant = _VARIANT_ALIASES.get(variant, variant)
    if variant not in DPM_VARIANTS:
        raise SesaError(f"unknown DPM variant {variant!r}; choose from {DPM_VARIANTS}")
    return variant


def build_dpm(wall_dtm, scar_dtm, variant="exp", background_dtm=None):
    """Turn wall/scar distance maps into a distance probability map.

    The normalized variants also need the distance to the background class
    and divide each channel by the three-class sum, so that
    ``exp_normalized`` is the softmax of the negated distances.
    """
    variant = normalize_variant(variant)
    wall = np.abs(np.asarray(wall_dtm, dtype=np.float64))
    scar = np.abs(np.asarray(scar_dtm, dtype=np.float64))
    if wall.shape != scar.shape:
        raise GridMismatchError(f"wall grid {wall.shape} != scar grid {scar.shape}")
    squash = expit if variant.startswith("expit") else np.exp
    p_normal = squash(-wall)
    p_scar = squash(-scar)
    if not variant.endswith("normalized"):
        return DistanceProbabilityMap(p_normal, p_scar, variant)
    if background_dtm is None:
        raise SesaError(f"variant {variant} needs the background distance map")
    back = np.abs(np.asarray(background_dtm, dtype=np.float64))
    if back.shape != wall.shape:
        raise GridMismatchError(f"background grid {back.shape} != wall grid {wall.shape}")
    if variant == "exp_normalized":
        # stable softmax over the three negated distances
        stack = -np.stack([wall, scar, back])
        stack = np.exp(stack - stack.max(axis=0))
    else:
        stack = np.stack([p_normal, p_scar, squash(-back)])
    stack = stack / stack.sum(axis=0)
    return DistanceProbabilityMap(stack[0], stack[1], variant, stack[2])


def dpm_from_labels(labels, variant="exp", beta=1.0, clip=50.0, spacing_aware=False):
    """Ground-truth DPM straight from a {0, 1, 2} wall/scar label."""
    wall, scar = dual_class_dtm(labels, beta, clip, spacing_aware)
    back = None
    if normalize_variant(variant).endswith("normalized"):
        back = class_distance(labels, 0, beta, clip, spacing_aware)
    return build_dpm(wall, scar, variant, back)
