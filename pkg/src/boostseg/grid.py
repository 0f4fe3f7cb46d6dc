"""Dense 3D grids, patch extraction, trilinear sampling, Dice and
connected-component post-processing.

Arrays are indexed ``data[x, y, z]``. On disk the linear voxel index is
``x + nx * (y + ny * z)`` (Fortran order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

VOLUME_MAGIC = b"BTVOL001"
KIND_F32 = 0
KIND_U8 = 1
_HEADER = struct.Struct("<8s4I3f")


class GridError(ValueError):
    """Invalid grid construction or mismatched grid arguments."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise GridError(f"spacing must have 3 components, got {spacing!r}")
    if not all(np.isfinite(s) for s in sp):
        raise GridError(f"non-finite spacing {sp}")
    if not all(s > 0 for s in sp):
        raise GridError(f"spacing components must be positive, got {sp}")
    return sp


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GridError(f"volume data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise GridError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    num_classes: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GridError(f"label data must be 3D, got shape {data.shape}")
        if self.num_classes < 2:
            raise GridError("num_classes must be >= 2")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise GridError(f"label values must lie in [0, {self.num_classes})")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def mask(self, class_id: int) -> np.ndarray:
        return self.data == class_id


@dataclass(frozen=True)
class ErrorMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise GridError(f"error map must be 3D, got shape {data.shape}")
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise GridError("error map values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def ones(cls, dims) -> "ErrorMap":
        return cls(np.ones(dims))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Patch:
    data: np.ndarray
    center: tuple[int, int, int]
    scale: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or not (d.shape[0] == d.shape[1] == d.shape[2]):
            raise GridError(f"patch data must be a cube, got {d.shape}")
        if self.scale not in (1, 4):
            raise GridError(f"patch scale must be 1 or 4, got {self.scale}")

    @property
    def size(self) -> int:
        return self.data.shape[0]


def check_pair(volume: Volume, labels: LabelMap) -> None:
    if volume.dims != labels.dims:
        raise GridError(f"volume dims {volume.dims} != label dims {labels.dims}")


# -- indexing -----------------------------------------------------------------

def mirror_index(idx, n: int) -> np.ndarray:
    """Reflect integer indices into ``[0, n)`` about the edge voxels.

    Index -1 maps to 1, index n maps to n - 2 (whole-sample symmetric).
    """
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patch(volume: Volume, center, size: int, scale: int = 1) -> Patch:
    if size < 1 or size % 2 == 0:
        raise GridError(f"patch size must be odd and positive, got {size}")
    if scale not in (1, 4):
        raise GridError(f"scale must be 1 or 4, got {scale}")
    center = tuple(int(c) for c in center)
    if any(not 0 <= c < n for c, n in zip(center, volume.dims)):
        raise IndexError(f"center {center} outside volume of dims {volume.dims}")
    return Patch(extract_block(volume.data, center, size, scale), center, scale)


def extract_block(data: np.ndarray, center, size: int, scale: int = 1) -> np.ndarray:
    offsets = (np.arange(size) - size // 2) * scale
    ix, iy, iz = (mirror_index(c + offsets, n) for c, n in zip(center, data.shape))
    return data[np.ix_(ix, iy, iz)]


# -- trilinear sampling ---------------------------------------------------------

def sample_trilinear(data: np.ndarray, coords, image=None) -> np.ndarray:
    """Trilinear interpolation of ``data`` at fractional voxel ``coords``.

    ``coords`` has a leading axis of length 3. Out-of-range positions are
    mirror-reflected. When ``image`` is given, ``data`` is a stack of equally
    shaped volumes and ``image`` selects one per sample (broadcast with the
    coordinate arrays).
    """
    coords = np.asarray(coords, dtype=np.float64)
    nx, ny, nz = data.shape[-3:]
    flat = data.reshape(-1)
    idx, wts = [], []
    for axis, n in enumerate((nx, ny, nz)):
        f = np.floor(coords[axis])
        i0 = f.astype(np.int64)
        w1 = coords[axis] - f
        idx.append((mirror_index(i0, n), mirror_index(i0 + 1, n)))
        wts.append((1.0 - w1, w1))
    base = 0 if image is None else np.asarray(image, dtype=np.int64) * nx
    xs = [(base + i) * ny for i in idx[0]]
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            xy = (xs[dx] + idx[1][dy]) * nz
            wxy = wts[0][dx] * wts[1][dy]
            for dz in (0, 1):
                out = out + (wxy * wts[2][dz]) * flat[xy + idx[2][dz]]
    return np.asarray(out)


def sample_nearest(data: np.ndarray, coords, image=None) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    shape = data.shape[-3:]
    idx = [mirror_index(np.floor(coords[a] + 0.5).astype(np.int64), shape[a]) for a in range(3)]
    if image is None:
        return data[idx[0], idx[1], idx[2]]
    return data[image, idx[0], idx[1], idx[2]]


def resample_trilinear(volume: Volume, target_spacing) -> Volume:
    """Resample onto a grid with ``target_spacing`` covering the same extent.

    Voxel centres of both grids share the origin at voxel (0, 0, 0).
    """
    target = _check_spacing(target_spacing)
    src = volume.spacing
    dims = [max(1, int(round(n * s / t))) for n, s, t in zip(volume.dims, src, target)]
    if tuple(dims) == volume.dims and target == src:
        return Volume(volume.data.copy(), target)
    axes = [np.arange(n) * (t / s) for n, s, t in zip(dims, src, target)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = sample_trilinear(volume.data, grid).astype(volume.data.dtype)
    return Volume(out, target)


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z (angles in degrees).

    Accepts ``(3,)`` or a batch ``(B, 3)``; returns ``(3, 3)`` or ``(B, 3, 3)``.
    """
    ang = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    ax, ay, az = ang[..., 0], ang[..., 1], ang[..., 2]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    one, zero = np.ones_like(ax), np.zeros_like(ax)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(ax.shape + (3, 3))
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(ax.shape + (3, 3))
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(ax.shape + (3, 3))
    return rz @ ry @ rx


def rotate_patch(patch: Patch, angles) -> Patch:
    """Rotate patch content about its centre voxel; trilinear, mirror edges."""
    if np.allclose(angles, 0.0):
        return Patch(patch.data.copy(), patch.center, patch.scale)
    n = patch.size
    off = np.arange(n) - n // 2
    grid = np.stack(np.meshgrid(off, off, off, indexing="ij")).reshape(3, -1)
    # output(o) = input(R^-1 o)
    src = rotation_matrix(angles).T @ grid + n // 2
    out = sample_trilinear(patch.data, src).reshape(n, n, n).astype(patch.data.dtype)
    return Patch(out, patch.center, patch.scale)


# -- metrics and post-processing -----------------------------------------------

def dice(pred: LabelMap, truth: LabelMap, class_id: int) -> float:
    if pred.dims != truth.dims:
        raise GridError(f"dims mismatch {pred.dims} vs {truth.dims}")
    if not 0 <= class_id < max(pred.num_classes, truth.num_classes):
        raise GridError(f"class_id {class_id} out of range")
    return dice_masks(pred.data == class_id, truth.data == class_id)


def dice_masks(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


_SIX = ndimage.generate_binary_structure(3, 1)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 6-connected component of a binary mask.

    Ties go to the component whose first voxel (in on-disk linear order)
    comes first.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    # Fortran-order transpose makes scipy's label numbering follow the
    # x + nx*(y + ny*z) linear order.
    labels, count = ndimage.label(mask.T, structure=_SIX)
    labels = labels.T
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    return labels == best


def largest_component_labels(labels: LabelMap) -> LabelMap:
    """Apply per-class largest-component filtering to every foreground class."""
    out = np.zeros_like(labels.data)
    for k in range(1, labels.num_classes):
        out[largest_component(labels.data == k)] = k
    return LabelMap(out, labels.num_classes, labels.spacing)


# -- file format ------------------------------------------------------------------

def _write_grid(path, data: np.ndarray, kind: int, spacing) -> None:
    nx, ny, nz = data.shape
    header = _HEADER.pack(VOLUME_MAGIC, nx, ny, nz, kind, *spacing)
    dtype = "<f4" if kind == KIND_F32 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(data, dtype=dtype).ravel(order="F").tobytes())


def save_volume(path, volume: Volume) -> None:
    _write_grid(path, volume.data, KIND_F32, volume.spacing)


def save_labels(path, labels: LabelMap) -> None:
    _write_grid(path, labels.data, KIND_U8, labels.spacing)


def save_error_map(path, error: ErrorMap, spacing=(1.0, 1.0, 1.0)) -> None:
    _write_grid(path, error.data, KIND_F32, spacing)


def read_grid(path) -> tuple[np.ndarray, int, tuple[float, float, float]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridError(f"{path}: truncated header")
    magic, nx, ny, nz, kind, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    if kind not in (KIND_F32, KIND_U8):
        raise GridError(f"{path}: unknown kind {kind}")
    dtype = np.dtype("<f4") if kind == KIND_F32 else np.dtype("u1")
    count = nx * ny * nz
    body = raw[_HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise GridError(f"{path}: expected {count} voxels of {dtype}")
    data = np.frombuffer(body, dtype=dtype).reshape((nx, ny, nz), order="F").copy()
    return data, kind, (sx, sy, sz)


def load_volume(path) -> Volume:
    data, kind, spacing = read_grid(path)
    if kind != KIND_F32:
        raise GridError(f"{path}: not a volume file")
    return Volume(data.astype(np.float32), spacing)


def load_labels(path, num_classes: int | None = None) -> LabelMap:
    data, kind, spacing = read_grid(path)
    if kind != KIND_U8:
        raise GridError(f"{path}: not a label file")
    if num_classes is None:
        num_classes = max(2, int(data.max()) + 1)
    return LabelMap(data, num_classes, spacing)


def as_center(c: Sequence[int]) -> tuple[int, int, int]:
    return tuple(int(v) for v in c)
