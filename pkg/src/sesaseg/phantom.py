"""Synthetic LA-like phantoms with exact ground truth.

A phantom is an ellipsoidal cavity with a few tubular vein stubs, a wall
ring of fixed voxel thickness around it, scar arcs painted on that ring,
optional bright distractor blobs in the background, and a Gaussian
intensity volume in which scar is the brightest class.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import SesaError
from .distance import boundary_set
from .surface import LabeledSurface, wall_ring
from .volume import LabelVolume, Volume3, payload_bytes, read_mvol, save

MANIFEST_FORMAT = "sesaseg-suite/1"
CASE_FILES = {"intensity": "intensity.mvol", "la": "la.mvol", "labels": "labels.mvol"}


@dataclass(frozen=True)
class ScarArc:
    """Scar patch on the wall: an azimuthal arc within a horizontal band."""

    azimuth: float = 0.0  # degrees, around the z axis through the centre
    width: float = 90.0  # degrees
    z_offset: float = 0.0  # mm from the cavity centre
    half_height: float = 2.5  # mm


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    semi_axes: tuple = (9.0, 8.0, 6.5)  # mm
    center: tuple | None = None  # mm; grid centre when None
    n_veins: int = 2
    vein_radius: float = 1.5  # mm
    vein_length: float = 3.0  # mm beyond the ellipsoid surface
    wall_thickness: int = 2  # voxels
    arcs: tuple = (ScarArc(),)
    n_distractors: int = 2
    distractor_radius: float = 2.0  # mm
    # (mean, std) per class
    background: tuple = (0.2, 0.08)
    blood: tuple = (0.55, 0.08)
    wall: tuple = (0.3, 0.08)
    scar: tuple = (0.75, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        arcs = tuple(a if isinstance(a, ScarArc) else ScarArc(**a) if isinstance(a, dict)
                     else ScarArc(*a) for a in self.arcs)
        object.__setattr__(self, "arcs", arcs)

    @property
    def center_mm(self):
        if self.center is not None:
            return tuple(float(c) for c in self.center)
        return tuple((n - 1) / 2.0 * s for n, s in zip(self.dims, self.spacing))

    def to_dict(self):
        d = asdict(self)
        d["arcs"] = [asdict(a) for a in self.arcs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["arcs"] = tuple(ScarArc(**a) for a in d.get("arcs", ()))
        for key in ("dims", "spacing", "semi_axes", "background", "blood", "wall", "scar"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("center") is not None:
            d["center"] = tuple(d["center"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PhantomCase:
    intensity: Volume3
    la_label: LabelVolume
    wall_scar_label: LabelVolume
    spec: PhantomSpec
    checksum: str
    case_id: str = "case"

    @property
    def scar_mask(self):
        return self.wall_scar_label.data == 2

    @property
    def wall_mask(self):
        return self.wall_scar_label.data > 0


# vein directions: tilted upward, alternating sides
_VEIN_DIRS = np.array([
    [0.55, 0.35, 0.76], [-0.55, 0.35, 0.76], [0.55, -0.35, 0.76], [-0.55, -0.35, 0.76],
])


def _coords(spec):
    axes = [np.arange(n) * s for n, s in zip(spec.dims, spec.spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_radius(direction, semi_axes):
    return 1.0 / np.sqrt(np.sum((direction / np.asarray(semi_axes)) ** 2))


def _segment_distance(X, Y, Z, p0, p1):
    d = p1 - p0
    t = ((X - p0[0]) * d[0] + (Y - p0[1]) * d[1] + (Z - p0[2]) * d[2]) / np.dot(d, d)
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((X - p0[0] - t * d[0]) ** 2 + (Y - p0[1] - t * d[1]) ** 2
                   + (Z - p0[2] - t * d[2]) ** 2)


def _check_feasible(spec):
    if spec.wall_thickness < 1:
        raise SesaError("wall thickness must be at least 1 voxel")
    if len(spec.dims) != 3 or min(spec.dims) < 1 or min(spec.spacing) <= 0:
        raise SesaError("invalid dims or spacing")
    if not 0 <= spec.n_veins <= len(_VEIN_DIRS):
        raise SesaError(f"n_veins must be between 0 and {len(_VEIN_DIRS)}")
    c = np.asarray(spec.center_mm)
    sp = np.asarray(spec.spacing)
    hi = (np.asarray(spec.dims) - 1) * sp
    margin = (2 + spec.wall_thickness) * sp
    semi = np.asarray(spec.semi_axes)
    if np.any(semi <= 0):
        raise SesaError("semi-axes must be positive")
    if np.any(c - semi < margin) or np.any(c + semi > hi - margin):
        raise SesaError(f"ellipsoid with semi-axes {semi.tolist()} mm at {c.tolist()} mm does not "
                        f"fit dims {spec.dims} with {2 + spec.wall_thickness} voxels to spare")
    for d in _VEIN_DIRS[:spec.n_veins]:
        d = d / np.linalg.norm(d)
        tip = c + d * (_ellipsoid_radius(d, semi) + spec.vein_length)
        if np.any(tip - spec.vein_radius < margin) or np.any(tip + spec.vein_radius > hi - margin):
            raise SesaError("vein stub leaves the grid margin")
    if sum(a.width for a in spec.arcs) > 360:
        raise SesaError("scar arcs overlap beyond the wall circumference")
    for a in spec.arcs:
        if not 0 < a.width <= 360 or a.half_height <= 0:
            raise SesaError(f"invalid scar arc {a}")
        if abs(a.z_offset) >= semi[2]:
            raise SesaError(f"scar arc band at z offset {a.z_offset} misses the wall")


def _arc_region(spec):
    """Voxels whose azimuth and height fall inside any scar arc."""
    X, Y, Z = _coords(spec)
    cx, cy, cz = spec.center_mm
    azimuth = np.degrees(np.arctan2(Y - cy, X - cx))
    region = np.zeros(spec.dims, dtype=bool)
    for arc in spec.arcs:
        delta = (azimuth - arc.azimuth + 180.0) % 360.0 - 180.0
        band = np.abs(Z - cz - arc.z_offset) <= arc.half_height
        region |= band & (np.abs(delta) <= arc.width / 2.0)
    return region


def _geometry(spec, rng):
    X, Y, Z = _coords(spec)
    cx, cy, cz = spec.center_mm
    a, b, c = spec.semi_axes
    la = ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 + ((Z - cz) / c) ** 2 <= 1.0
    center = np.array([cx, cy, cz])
    for d in _VEIN_DIRS[:spec.n_veins]:
        d = d / np.linalg.norm(d)
        r = _ellipsoid_radius(d, spec.semi_axes)
        p0 = center + d * 0.7 * r
        p1 = center + d * (r + spec.vein_length)
        la |= _segment_distance(X, Y, Z, p0, p1) <= spec.vein_radius

    wall = wall_ring(la, spec.wall_thickness)
    surface_scar = boundary_set(la) & _arc_region(spec)
    # Extrude the surface patch through the wall one dilation layer at a time.
    # First layer: scar if it touches any scar surface voxel, so every scar
    # surface voxel sees only scar at distance 1. Deeper layers: scar only if
    # all their neighbours in the previous layer are scar, which keeps the
    # patch from widening outward.
    face = ndimage.generate_binary_structure(3, 1)
    kernel = face.astype(np.int64)
    scar = np.zeros_like(wall)
    prev, prev_scar, inside = la, surface_scar, la
    for depth in range(spec.wall_thickness):
        layer = ndimage.binary_dilation(inside, face) & ~inside
        hits = ndimage.convolve(prev_scar.astype(np.int64), kernel, mode="constant")
        if depth == 0:
            front = layer & (hits > 0)
        else:
            touch = ndimage.convolve(prev.astype(np.int64), kernel, mode="constant")
            front = layer & (hits > 0) & (hits == touch)
        scar |= front
        prev, prev_scar, inside = layer, front, inside | layer

    distractors = np.zeros_like(wall)
    if spec.n_distractors:
        keep_out = wall_ring(la, spec.wall_thickness + 3) | la
        hi = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
        placed = 0
        for _ in range(200):
            if placed == spec.n_distractors:
                break
            p = rng.uniform(spec.distractor_radius + 1, hi - spec.distractor_radius - 1)
            blob = (X - p[0]) ** 2 + (Y - p[1]) ** 2 + (Z - p[2]) ** 2 <= spec.distractor_radius**2
            if blob.any() and not (blob & keep_out).any() and not (blob & distractors).any():
                distractors |= blob
                placed += 1
    return la, wall, scar, distractors


def generate(spec, case_id="case"):
    """Build one phantom. Identical specs (including seed) give identical cases."""
    _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    la, wall, scar, distractors = _geometry(spec, rng)
    noise = rng.standard_normal(spec.dims)
    mean = np.full(spec.dims, spec.background[0])
    std = np.full(spec.dims, spec.background[1])
    for mask, (mu, sd) in ((distractors, spec.blood), (la, spec.blood), (wall, spec.wall),
                           (scar, spec.scar)):
        mean[mask] = mu
        std[mask] = sd
    intensity = Volume3(mean + std * noise, spec.spacing)
    la_label = LabelVolume(la.astype(np.float64), spec.spacing, alphabet=(0, 1))
    labels = np.where(scar, 2.0, np.where(wall, 1.0, 0.0))
    wall_scar = LabelVolume(labels, spec.spacing, alphabet=(0, 1, 2))
    digest = hashlib.sha256()
    for vol in (intensity, la_label, wall_scar):
        digest.update(payload_bytes(vol))
    return PhantomCase(intensity, la_label, wall_scar, spec, digest.hexdigest(), case_id)


def surface_scar_truth(case):
    """The generated scar arcs as labels on the LA surface (boundary of ``la_label``).

    The wall scar is an extrusion of exactly this patch, so it is the
    reference a perfect classifier should recover.
    """
    la = case.la_label.data > 0
    surface = boundary_set(la)
    region = _arc_region(case.spec)
    pts = np.stack(np.unravel_index(np.flatnonzero(surface.ravel(order="F")), la.shape,
                                    order="F"), axis=1).astype(np.int64)
    i, j, k = pts.T
    return LabeledSurface(pts, region[i, j, k], la.shape, case.spec.spacing)


def scaled_spec(dims, spacing=(1.0, 1.0, 1.0), base=None):
    """``base`` (default anatomy on a 32-voxel grid) rescaled to a grid of ``dims``."""
    base = base or PhantomSpec()
    pad = 2 * (2 + base.wall_thickness)  # voxels kept clear on both sides

    def interior(d, h):
        return min((int(n) - 1 - pad) * float(x) for n, x in zip(d, h))

    f = interior(dims, spacing) / interior(base.dims, base.spacing)
    return replace(base, dims=tuple(int(n) for n in dims), spacing=tuple(float(h) for h in spacing),
                   semi_axes=tuple(round(a * f, 3) for a in base.semi_axes),
                   vein_radius=round(base.vein_radius * f, 3),
                   vein_length=round(base.vein_length * f, 3),
                   distractor_radius=round(base.distractor_radius * f, 3))


def case_seed(seed, index):
    """Per-case seed derived from the suite seed and the case index only."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def randomize_spec(base, seed):
    """Jitter cavity shape, scar arcs and distractors of ``base`` from ``seed``."""
    rng = np.random.default_rng(seed)
    semi = tuple(round(float(a * rng.uniform(0.88, 1.08)), 3) for a in base.semi_axes)
    n_arcs = int(rng.integers(1, 3))
    arcs = []
    start = rng.uniform(-180, 180)
    for _ in range(n_arcs):
        width = float(rng.uniform(80, 120))
        arcs.append(ScarArc(
            azimuth=round(float((start + width / 2 + 180) % 360 - 180), 3),
            width=round(width, 3),
            z_offset=round(float(rng.uniform(-0.4, 0.4) * semi[2]), 3),
            half_height=round(float(rng.uniform(3.5, 5.5)), 3),
        ))
        start += width + rng.uniform(15, 40)
    spec = replace(base, semi_axes=semi, arcs=tuple(arcs), seed=int(rng.integers(0, 2**31 - 1)))
    _check_feasible(spec)
    return spec


def write_case(case, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save(directory / CASE_FILES["intensity"], case.intensity, "intensity")
    save(directory / CASE_FILES["la"], case.la_label, "label")
    save(directory / CASE_FILES["labels"], case.wall_scar_label, "label")


def load_case(directory, case_id=None, spec=None):
    directory = Path(directory)
    _, intensity = read_mvol(directory / CASE_FILES["intensity"])
    _, la = read_mvol(directory / CASE_FILES["la"])
    _, labels = read_mvol(directory / CASE_FILES["labels"])
    digest = hashlib.sha256()
    for vol in (intensity, la, labels):
        digest.update(payload_bytes(vol))
    return PhantomCase(intensity, la, labels, spec, digest.hexdigest(), case_id or directory.name)


def generate_suite(n_train, n_test, base_spec=None, seed=0, out_dir=None):
    """Generate ``n_train + n_test`` randomized cases; returns the manifest dict.

    When ``out_dir`` is given each case is written to ``out_dir/<case_id>/`` and
    the manifest to ``out_dir/manifest.json``.
    """
    if n_train < 1 or n_test < 1:
        raise SesaError("a suite needs at least one training and one test case")
    base_spec = base_spec or PhantomSpec()
    cases = []
    entries = []
    for index in range(n_train + n_test):
        split = "train" if index < n_train else "test"
        cid = f"case_{index:03d}"
        spec = randomize_spec(base_spec, case_seed(seed, index))
        case = generate(spec, cid)
        cases.append(case)
        entries.append({
            "case_id": cid,
            "split": split,
            "seed": spec.seed,
            "dir": cid,
            "checksum": case.checksum,
            "files": dict(CASE_FILES),
            "spec": spec.to_dict(),
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "n_train": int(n_train),
        "n_test": int(n_test),
        "base_spec": base_spec.to_dict(),
        "cases": entries,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for case in cases:
            write_case(case, out / case.case_id)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest, cases


def validate_manifest(manifest, root=None):
    """Check structure (and, with ``root``, files and checksums). Raises on failure."""
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SesaError(f"unknown manifest format {manifest.get('format')!r}")
    entries = manifest.get("cases", [])
    splits = [e["split"] for e in entries]
    if splits.count("train") != manifest["n_train"] or splits.count("test") != manifest["n_test"]:
        raise SesaError("manifest split counts do not match its case list")
    if len({e["case_id"] for e in entries}) != len(entries):
        raise SesaError("duplicate case ids in manifest")
    if root is not None:
        for e in entries:
            case = load_case(Path(root) / e["dir"], e["case_id"])
            if case.checksum != e["checksum"]:
                raise SesaError(f"checksum mismatch for {e['case_id']}")
    return True


def load_suite(directory):
    """Return ``(manifest, {case_id: PhantomCase}, {case_id: split})``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    validate_manifest(manifest)
    cases = {}
    splits = {}
    for e in manifest["cases"]:
        spec = PhantomSpec.from_dict(e["spec"])
        cases[e["case_id"]] = load_case(directory / e["dir"], e["case_id"], spec)
        splits[e["case_id"]] = e["split"]
    return manifest, cases, splits


def suite_in_memory(n_train, n_test, base_spec=None, seed=0):
    """Same cases as :func:`generate_suite` without touching disk."""
    manifest, cases = generate_suite(n_train, n_test, base_spec, seed)
    splits = {e["case_id"]: e["split"] for e in manifest["cases"]}
    return manifest, {c.case_id: c for c in cases}, splits


__all__ = [
    "ScarArc", "PhantomSpec", "PhantomCase", "generate", "generate_suite", "randomize_spec",
    "scaled_spec",
    "case_seed", "write_case", "load_case", "load_suite", "validate_manifest", "suite_in_memory",
    "surface_scar_truth",
]
