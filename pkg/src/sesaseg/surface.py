"""LA surface extraction, attention masks and scar projection onto the surface."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .distance import boundary_set
from .errors import DegenerateInputError, EmptyClassError, GridMismatchError, SesaError

SCAR_RGB = (255, 0, 0)
NORMAL_RGB = (255, 255, 255)


@dataclass(frozen=True, eq=False)
class SurfaceMask:
    """Attention mask with values in [0, 1].

    ``kind`` is ``"hard_gt"`` for a binary boundary set or
    ``"soft_predicted"`` for a normalized gradient-magnitude field.
    """

    mask: np.ndarray
    kind: str
    source: str = ""

    def __array__(self, dtype=None, copy=None):
        return self.mask if dtype is None else self.mask.astype(dtype)

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class LabeledSurface:
    """Surface voxels (sorted by x-fastest linear index) with a scar flag each."""

    points: np.ndarray  # (K, 3) int voxel indices
    scar: np.ndarray  # (K,) bool
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.points)

    @property
    def linear(self):
        i, j, k = self.points.T
        nx, ny, _ = self.dims
        return i + nx * (j + ny * k)

    def to_label_volume(self):
        """Rasterize: 1 on normal surface voxels, 2 on scar, 0 elsewhere."""
        out = np.zeros(self.dims)
        i, j, k = self.points.T
        out[i, j, k] = np.where(self.scar, 2.0, 1.0)
        return out


def _points_of(mask):
    """Indices of nonzero voxels, ordered by x-fastest linear index."""
    dims = mask.shape
    flat = np.flatnonzero(np.asarray(mask).ravel(order="F"))
    return np.stack(np.unravel_index(flat, dims, order="F"), axis=1).astype(np.int64)


def hard_boundary_mask(la_label):
    fg = np.asarray(la_label)
    if not fg.any() or fg.all():
        raise EmptyClassError("LA label needs foreground and background to have a boundary")
    surface = boundary_set(fg)
    if not surface.any():
        raise EmptyClassError("LA label has an empty boundary set")
    return SurfaceMask(surface.astype(np.float64), "hard_gt", "boundary of binary LA label")


def wall_ring(la_label, thickness=2):
    """Voxels within ``thickness`` face-connected dilation steps outside the LA."""
    if thickness < 1:
        raise SesaError(f"wall thickness must be at least 1, got {thickness}")
    la = np.asarray(la_label) > 0
    grown = ndimage.binary_dilation(la, ndimage.generate_binary_structure(3, 1), iterations=thickness)
    return grown & ~la


def _diff(f, ax):
    """Central differences along ``ax``, one-sided at the two faces."""
    n = f.shape[ax]
    out = np.zeros_like(f)
    if n < 2:
        return out
    f = np.moveaxis(f, ax, 0)
    o = np.moveaxis(out, ax, 0)
    o[0] = f[1] - f[0]
    o[-1] = f[-1] - f[-2]
    if n > 2:
        o[1:-1] = (f[2:] - f[:-2]) / 2.0
    return out


def _diff_adjoint(g, ax):
    """Transpose of :func:`_diff`."""
    n = g.shape[ax]
    out = np.zeros_like(g)
    if n < 2:
        return out
    g = np.moveaxis(g, ax, 0)
    o = np.moveaxis(out, ax, 0)
    o[0] -= g[0]
    o[1] += g[0]
    o[-2] -= g[-1]
    o[-1] += g[-1]
    if n > 2:
        o[:-2] -= g[1:-1] / 2.0
        o[2:] += g[1:-1] / 2.0
    return out


def _gradient_magnitude(f):
    comps = [_diff(f, ax) for ax in range(3)]
    mag = np.sqrt(comps[0] ** 2 + comps[1] ** 2 + comps[2] ** 2)
    return comps, mag


def soft_boundary_mask(la_prob):
    """Normalized gradient magnitude of a predicted LA probability map."""
    f = np.asarray(la_prob, dtype=np.float64)
    if f.min() < 0 or f.max() > 1:
        raise SesaError("LA probabilities must lie in [0, 1]")
    _, mag = _gradient_magnitude(f)
    peak = mag.max()
    if peak == 0:
        raise DegenerateInputError("LA probability map is constant; its gradient vanishes")
    return SurfaceMask(mag / peak, "soft_predicted", "gradient magnitude of predicted LA")


def soft_boundary_mask_vjp(la_prob, grad_mask):
    """Pull ``dL/dmask`` back to ``dL/dla_prob`` through :func:`soft_boundary_mask`.

    Where the gradient magnitude is exactly zero the (non-existent) derivative
    is taken as zero.
    """
    f = np.asarray(la_prob, dtype=np.float64)
    G = np.asarray(grad_mask, dtype=np.float64)
    comps, mag = _gradient_magnitude(f)
    flat_peak = int(np.argmax(mag))
    peak = mag.flat[flat_peak]
    if peak == 0:
        raise DegenerateInputError("LA probability map is constant; its gradient vanishes")
    d_mag = G / peak
    d_mag.flat[flat_peak] -= float(np.sum(G * mag)) / peak**2
    safe = np.where(mag > 0, mag, 1.0)
    scale = np.where(mag > 0, d_mag / safe, 0.0)
    out = np.zeros_like(f)
    for ax in range(3):
        out += _diff_adjoint(scale * comps[ax], ax)
    return out


def classify_surface(dpm_pred, surface, spacing=(1.0, 1.0, 1.0)):
    """Label each surface voxel scar iff the predicted scar probability is larger.

    Ties go to normal wall.
    """
    mask = np.asarray(surface)
    p_normal = np.asarray(dpm_pred.p_normal)
    p_scar = np.asarray(dpm_pred.p_scar)
    if p_normal.shape != mask.shape or p_scar.shape != mask.shape:
        raise GridMismatchError(f"DPM grid {p_normal.shape} != surface grid {mask.shape}")
    if getattr(surface, "kind", "hard_gt") != "hard_gt":
        raise SesaError("classify_surface needs a hard surface mask")
    pts = _points_of(mask > 0)
    i, j, k = pts.T
    scar = p_scar[i, j, k] > p_normal[i, j, k]
    return LabeledSurface(pts, scar, mask.shape, tuple(spacing))


def _offsets(radius):
    r = int(np.floor(radius))
    ax = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = (off**2).sum(axis=1)
    keep = d2 <= radius * radius
    off, d2 = off[keep], d2[keep]
    order = np.argsort(d2, kind="stable")
    return off[order], d2[order]


def project_volume_labels(scar_label, reference_surface, radius=3.0):
    """Give each reference-surface voxel the class of the nearest labelled voxel.

    Labelled means wall (1) or scar (2). The search is Euclidean in voxels and
    limited to ``radius``; equidistant candidates resolve to the smaller linear
    index. Surface voxels with nothing in range default to normal.
    """
    labels = np.asarray(scar_label)
    mask = np.asarray(reference_surface)
    if labels.shape != mask.shape:
        raise GridMismatchError(f"label grid {labels.shape} != surface grid {mask.shape}")
    if radius < 0:
        raise SesaError(f"radius must be non-negative, got {radius}")
    dims = labels.shape
    nx, ny, _ = dims
    pts = _points_of(mask > 0)
    n = len(pts)
    scar = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    off, d2 = _offsets(radius)
    bounds = np.array(dims)
    for dist in np.unique(d2):
        best = np.full(n, np.iinfo(np.int64).max)
        best_cls = np.zeros(n, dtype=bool)
        for o in off[d2 == dist]:
            q = pts + o
            ok = ~done & np.all((q >= 0) & (q < bounds), axis=1)
            if not ok.any():
                continue
            qi = q[ok]
            lab = labels[qi[:, 0], qi[:, 1], qi[:, 2]]
            hit = lab > 0
            idx = np.flatnonzero(ok)[hit]
            lin = qi[hit, 0] + nx * (qi[hit, 1] + ny * qi[hit, 2])
            better = lin < best[idx]
            best[idx[better]] = lin[better]
            best_cls[idx[better]] = lab[hit][better] == 2
        found = best != np.iinfo(np.int64).max
        scar[found] = best_cls[found]
        done |= found
        if done.all():
            break
    return LabeledSurface(pts, scar, dims, getattr(scar_label, "spacing", (1.0, 1.0, 1.0)))


def ply_bytes(surface):
    if len(surface) == 0:
        raise SesaError("cannot export an empty surface")
    sx, sy, sz = surface.spacing
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(surface)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (i, j, k), is_scar in zip(surface.points.tolist(), surface.scar.tolist()):
        r, g, b = SCAR_RGB if is_scar else NORMAL_RGB
        lines.append(f"{i * sx:.6f} {j * sy:.6f} {k * sz:.6f} {r} {g} {b}")
    return ("\n".join(lines) + "\n").encode("ascii")


def export_labeled_surface_ply(surface, path):
    """Write an ASCII PLY point cloud, scar red and normal wall white."""
    Path(path).write_bytes(ply_bytes(surface))
