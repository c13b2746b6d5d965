"""Dense 3-D voxel grids and their on-disk format.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. Flattening uses
Fortran order so the flat layout is x-fastest: the linear index of
``(i, j, k)`` is ``i + nx * (j + ny * k)``.

MVOL files hold one UTF-8 JSON header line terminated by ``\\n`` followed by
the raw little-endian float64 payload in that flat order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    GridMismatchError,
    MvolError,
    MvolHeaderError,
    MvolNonFiniteError,
    MvolPayloadLengthError,
    MvolUnknownKindError,
    SesaError,
)

KINDS = ("intensity", "label", "probability", "distance")
_AXES = {"x": 0, "y": 1, "z": 2}


def _as_triple(values, name):
    t = tuple(values)
    if len(t) != 3:
        raise SesaError(f"{name} must have three components, got {t!r}")
    return t


@dataclass(frozen=True, eq=False)
class Volume3:
    """A dense 3-D float64 grid with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise SesaError(f"volume data must be a non-empty 3-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise SesaError("volume contains non-finite values")
        spacing = tuple(float(s) for s in _as_triple(self.spacing, "spacing"))
        if not all(s > 0 for s in spacing):
            raise SesaError(f"spacing must be strictly positive, got {spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def flat(self):
        """Values in x-fastest order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, spacing=(1.0, 1.0, 1.0), **kwargs):
        dims = tuple(int(n) for n in _as_triple(dims, "dims"))
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise SesaError(f"{values.size} values cannot fill dims {dims}")
        return cls(values.reshape(dims, order="F"), spacing, **kwargs)

    def with_data(self, data):
        return Volume3(data, self.spacing)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume3):
    """A volume whose voxels all belong to ``alphabet``."""

    alphabet: tuple = (0, 1)

    def __post_init__(self):
        super().__post_init__()
        alphabet = tuple(sorted(int(a) for a in self.alphabet))
        object.__setattr__(self, "alphabet", alphabet)
        bad = ~np.isin(self.data, alphabet)
        if bad.any():
            first = tuple(int(c) for c in np.argwhere(bad)[0])
            raise SesaError(
                f"label value {self.data[first]!r} at {first} is outside alphabet {alphabet}"
            )

    def with_data(self, data):
        return LabelVolume(data, self.spacing, alphabet=self.alphabet)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    spacing: tuple
    kind: str
    alphabet: tuple | None = None
    checksum: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.alphabet is not None:
            object.__setattr__(self, "alphabet", tuple(int(a) for a in self.alphabet))

    @classmethod
    def for_volume(cls, volume, kind=None):
        if kind is None:
            kind = "label" if isinstance(volume, LabelVolume) else "intensity"
        alphabet = volume.alphabet if kind == "label" and isinstance(volume, LabelVolume) else None
        return cls(volume.dims, volume.spacing, kind, alphabet)


def linear_index(i, j, k, dims):
    nx, ny, _ = dims
    return i + nx * (j + ny * k)


def unravel_index(index, dims):
    nx, ny, _ = dims
    i = index % nx
    j = (index // nx) % ny
    k = index // (nx * ny)
    return i, j, k


def payload_bytes(volume):
    return np.ascontiguousarray(volume.flat(), dtype="<f8").tobytes()


def payload_checksum(volume):
    return hashlib.sha256(payload_bytes(volume)).hexdigest()


def encode_mvol(header, volume):
    """Serialize to MVOL bytes. Identical inputs give identical bytes."""
    if tuple(header.dims) != volume.dims:
        raise GridMismatchError(f"header dims {header.dims} != volume dims {volume.dims}")
    if tuple(header.spacing) != volume.spacing:
        raise GridMismatchError(f"header spacing {header.spacing} != volume spacing {volume.spacing}")
    if header.kind not in KINDS:
        raise SesaError(f"unknown value kind {header.kind!r}")
    meta = {"dims": list(header.dims), "spacing": list(header.spacing), "kind": header.kind}
    if header.kind == "label":
        if header.alphabet is None:
            raise SesaError("label volumes need an alphabet")
        bad = ~np.isin(volume.data, header.alphabet)
        if bad.any():
            raise SesaError(
                f"label volume has values outside alphabet {header.alphabet}: "
                f"{sorted(set(np.unique(volume.data[bad]).tolist()))}"
            )
        meta["alphabet"] = list(header.alphabet)
    elif header.kind == "probability":
        if volume.data.min() < 0 or volume.data.max() > 1:
            raise SesaError("probability volume has values outside [0, 1]")
    payload = payload_bytes(volume)
    meta["checksum"] = hashlib.sha256(payload).hexdigest()
    line = json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n"
    return line.encode("utf-8") + payload


def write_mvol(path, header, volume):
    """Write ``volume`` to ``path``; returns the header with its checksum filled in."""
    Path(path).write_bytes(encode_mvol(header, volume))
    return VolumeHeader(header.dims, header.spacing, header.kind, header.alphabet,
                        payload_checksum(volume))


def decode_mvol(blob):
    """Parse MVOL bytes into ``(VolumeHeader, Volume3)``."""
    newline = blob.find(b"\n")
    if newline < 0:
        raise MvolHeaderError("header line is not terminated by a newline", len(blob))
    try:
        meta = json.loads(blob[:newline].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MvolHeaderError(f"header is not UTF-8: {exc.reason}", exc.start) from None
    except json.JSONDecodeError as exc:
        raise MvolHeaderError(f"header is not valid JSON: {exc.msg}", exc.pos) from None
    if not isinstance(meta, dict):
        raise MvolHeaderError("header must be a JSON object", 0)
    for key in ("dims", "spacing", "kind"):
        if key not in meta:
            raise MvolHeaderError(f"header is missing key {key!r}", newline)
    kind = meta["kind"]
    if kind not in KINDS:
        raise MvolUnknownKindError(f"unknown value kind {kind!r}", blob.find(b'"kind"'))
    try:
        dims = tuple(int(n) for n in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except (TypeError, ValueError):
        raise MvolHeaderError("dims/spacing must be numeric lists", 0) from None
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3 or min(spacing) <= 0:
        raise MvolHeaderError(f"invalid dims {dims} or spacing {spacing}", 0)
    alphabet = meta.get("alphabet")
    if kind == "label" and alphabet is None:
        raise MvolHeaderError("label volume header lacks an alphabet", newline)

    start = newline + 1
    expected = 8 * int(np.prod(dims))
    actual = len(blob) - start
    if actual != expected:
        raise MvolPayloadLengthError(
            f"payload holds {actual} bytes, dims {dims} need {expected}", start + min(actual, expected)
        )
    values = np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64)
    finite = np.isfinite(values)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise MvolNonFiniteError(f"payload value {idx} is {values[idx]!r}", start + 8 * idx)
    checksum = meta.get("checksum")
    if checksum is not None and hashlib.sha256(blob[start:]).hexdigest() != checksum:
        raise MvolError("payload checksum does not match header", start)

    if kind == "label":
        try:
            volume = LabelVolume.from_flat(values, dims, spacing, alphabet=tuple(alphabet))
        except SesaError as exc:
            raise MvolError(str(exc), start) from None
    else:
        volume = Volume3.from_flat(values, dims, spacing)
    header = VolumeHeader(dims, spacing, kind, tuple(alphabet) if alphabet else None, checksum)
    return header, volume


def read_mvol(path):
    return decode_mvol(Path(path).read_bytes())


def save(path, volume, kind=None):
    """Shorthand for ``write_mvol`` with a header derived from ``volume``."""
    return write_mvol(path, VolumeHeader.for_volume(volume, kind), volume)


def load(path):
    return read_mvol(path)[1]


def export_slice_pgm(volume, axis, index, window):
    """Render one slice as binary 8-bit PGM bytes.

    ``window=(lo, hi)`` maps ``lo`` to 0 and ``hi`` to 255 linearly, clamping
    outside. Slices normal to z have x across and y down; slices normal to x
    or y have z down.
    """
    data = np.asarray(volume, dtype=np.float64)
    if axis not in _AXES:
        raise SesaError(f"axis must be one of x, y, z, got {axis!r}")
    ax = _AXES[axis]
    if not 0 <= index < data.shape[ax]:
        raise SesaError(f"slice index {index} out of range for axis {axis} of size {data.shape[ax]}")
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise SesaError(f"degenerate window ({lo}, {hi})")
    plane = np.take(data, index, axis=ax)  # remaining axes in (x, y, z) order
    image = plane.T  # rows follow the later axis
    scaled = np.clip(np.rint((image - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes()
