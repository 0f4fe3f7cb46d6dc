"""Synthetic CT-like phantoms plus the intensity normalisation and patch
augmentation used for training.

Phantoms contain sparse ellipsoidal "organs" and elongated tube distractors
that share an organ's intensity but are labelled background, so intensity
alone cannot separate them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import LabelMap, Volume, rotation_matrix, sample_nearest, sample_trilinear


class GenerationError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 2
    foreground_fraction_target: float = 0.003
    blobs_per_class: int = 2
    distractor_count: int = 3
    intensity_means: tuple[float, ...] = (0.0, 150.0)
    distractor_class: int = 1
    distractor_radius: float = 1.6
    noise_sigma: float = 40.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.intensity_means = tuple(float(m) for m in self.intensity_means)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not 0.0 < self.foreground_fraction_target < 0.5:
            raise ValueError("foreground_fraction_target must lie in (0, 0.5)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.intensity_means) != self.num_classes:
            raise ValueError("need one intensity mean per class")
        if not 1 <= self.distractor_class < self.num_classes:
            raise ValueError("distractor_class must name a foreground class")
        if self.blobs_per_class < 1 or self.distractor_count < 0:
            raise ValueError("blobs_per_class must be >= 1 and distractor_count >= 0")

    @property
    def distractor_mean(self) -> float:
        return self.intensity_means[self.distractor_class]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentConfig:
    base_spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    spacing_jitter: float = 0.1
    rotation_ranges: tuple[float, float, float] = (10.0, 4.0, 4.0)
    enabled: bool = True

    def __post_init__(self):
        self.base_spacing = tuple(float(s) for s in self.base_spacing)
        self.rotation_ranges = tuple(float(r) for r in self.rotation_ranges)
        if not 0 <= self.spacing_jitter < min(self.base_spacing):
            raise ValueError("spacing_jitter must be below the smallest base spacing")


@dataclass
class NormalizeConfig:
    clamp_lo: float = -1000.0
    clamp_hi: float = 1000.0
    divisor: float = 218.0

    def __post_init__(self):
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be below clamp_hi")
        if not self.divisor > 0:
            raise ValueError("divisor must be positive")


# -- phantoms -----------------------------------------------------------------------

def _ellipsoid(dims, center, radii):
    """Boolean mask and bounding slices of an axis-aligned ellipsoid."""
    lo = [max(0, int(math.floor(c - r))) for c, r in zip(center, radii)]
    hi = [min(n, int(math.ceil(c + r)) + 1) for c, r, n in zip(center, radii, dims)]
    axes = [(np.arange(a, b) - c) / r for a, b, c, r in zip(lo, hi, center, radii)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij", sparse=True)
    local = gx ** 2 + gy ** 2 + gz ** 2 <= 1.0
    return local, tuple(slice(a, b) for a, b in zip(lo, hi))


def _dilate(mask, k):
    from scipy import ndimage

    return ndimage.binary_dilation(mask, iterations=k) if k > 0 else mask


def _place_blobs(cfg: PhantomConfig, rng, labels):
    dims = cfg.dims
    n_fg = cfg.num_classes - 1
    per_blob = cfg.foreground_fraction_target * np.prod(dims) / (n_fg * cfg.blobs_per_class)
    r0 = (3.0 * per_blob / (4.0 * math.pi)) ** (1.0 / 3.0)
    if r0 < 1.0:
        raise GenerationError(f"blobs of {per_blob:.1f} voxels are too small to draw")
    occupied = np.zeros(dims, dtype=bool)
    for k in range(1, cfg.num_classes):
        for _ in range(cfg.blobs_per_class):
            for _attempt in range(200):
                aspect = np.exp(rng.uniform(-0.25, 0.25, size=3))
                aspect /= np.prod(aspect) ** (1.0 / 3.0)
                radii = r0 * aspect
                margin = radii + 2
                if np.any(2 * margin >= dims):
                    raise GenerationError(f"blob radius {radii.max():.1f} does not fit dims {dims}")
                center = rng.uniform(margin, np.asarray(dims) - margin)
                local, sl = _ellipsoid(dims, center, radii)
                if not occupied[sl][local].any():
                    labels[sl][local] = k
                    occupied[sl] |= local
                    break
            else:
                raise GenerationError("could not place non-overlapping blobs")
    return occupied


def _place_tubes(cfg: PhantomConfig, rng, forbidden):
    dims = np.asarray(cfg.dims)
    tubes = []
    taken = forbidden.copy()
    r = cfg.distractor_radius
    for _ in range(cfg.distractor_count):
        for _attempt in range(200):
            axis = int(rng.integers(3))
            length = rng.uniform(0.5, 0.9) * dims[axis]
            lo = rng.uniform(0, dims[axis] - length)
            center = rng.uniform(r + 1, dims - r - 1)
            grids = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij", sparse=True)
            others = [a for a in range(3) if a != axis]
            d2 = sum((grids[a] - center[a]) ** 2 for a in others)
            along = (grids[axis] >= lo) & (grids[axis] <= lo + length)
            mask = (d2 <= r * r) & along
            if mask.any() and not (mask & taken).any():
                tubes.append(mask)
                taken |= _dilate(mask, 1)
                break
        else:
            raise GenerationError("could not place distractor tubes clear of the organs")
    return tubes


def generate_phantom(config: PhantomConfig, return_distractors: bool = False):
    """Deterministic phantom ``(Volume, LabelMap)`` for ``config.seed``.

    With ``return_distractors`` a third element lists one boolean mask per
    distractor tube.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    target = cfg.foreground_fraction_target * np.prod(cfg.dims)
    for _attempt in range(20):
        labels = np.zeros(cfg.dims, dtype=np.uint8)
        occupied = _place_blobs(cfg, rng, labels)
        count = int((labels > 0).sum())
        if 0.5 * target <= count <= 1.5 * target:
            break
    else:
        raise GenerationError(f"foreground fraction target {cfg.foreground_fraction_target} "
                              f"unachievable for dims {cfg.dims}")
    tubes = _place_tubes(cfg, rng, _dilate(occupied, 2))

    means = np.asarray(cfg.intensity_means)
    data = means[labels].astype(np.float64)
    for t in tubes:
        data[t] = cfg.distractor_mean
    data += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    vol = Volume(data.astype(np.float32), cfg.spacing)
    lab = LabelMap(labels, cfg.num_classes, cfg.spacing)
    if return_distractors:
        return vol, lab, tubes
    return vol, lab


def normalize(volume: Volume, config: NormalizeConfig | None = None) -> Volume:
    """Clamp to ``[clamp_lo, clamp_hi]`` then divide by ``divisor``."""
    cfg = config or NormalizeConfig()
    out = np.clip(volume.data, cfg.clamp_lo, cfg.clamp_hi) / cfg.divisor
    return Volume(out.astype(np.float32), volume.spacing)


# -- augmentation ----------------------------------------------------------------------

@dataclass
class AugmentedSample:
    native: np.ndarray
    low: np.ndarray | None
    target: np.ndarray | None
    spacing: np.ndarray = field(default=None)
    angles: np.ndarray = field(default=None)


def draw_transforms(rng, config: AugmentConfig, count: int):
    """Per-sample target spacings and rotation angles, shape ``(count, 3)`` each.

    Spacing jitter is drawn independently per axis.
    """
    base = np.asarray(config.base_spacing)
    if not config.enabled:
        return np.tile(base, (count, 1)), np.zeros((count, 3))
    j = config.spacing_jitter
    ranges = np.asarray(config.rotation_ranges)
    jitter = np.asarray(rng.uniform(-j, j, size=(count, 3)), dtype=np.float64)
    angles = np.asarray(rng.uniform(-ranges, ranges, size=(count, 3)), dtype=np.float64)
    return base + jitter, angles


def patch_coords(centers, size: int, scale: int, spacings, angles, source_spacing):
    """Source voxel coordinates for a batch of transformed patches.

    Returns shape ``(3, B, size, size, size)``. Patch offsets (in output
    voxels, times ``scale``) are laid out at ``spacings`` mm, rotated about
    the centre and mapped back onto the source grid.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    spacings = np.asarray(spacings, dtype=np.float64).reshape(-1, 3)
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    src = np.asarray(source_spacing, dtype=np.float64)
    off = (np.arange(size) - size // 2) * float(scale)
    grid = np.stack(np.meshgrid(off, off, off, indexing="ij")).reshape(3, -1)
    phys = spacings[:, :, None] * grid[None]
    if np.any(angles):
        # output(o) = input(R^-1 o)
        phys = np.einsum("bji,bjn->bin", rotation_matrix(angles), phys)
    out = centers[:, :, None] + phys / src[None, :, None]
    return out.transpose(1, 0, 2).reshape(3, len(centers), size, size, size)


def augment(volume: Volume, center, sizes, config: AugmentConfig, rng,
            labels: LabelMap | None = None, target_size: int = 1) -> AugmentedSample:
    """Augmented native and quarter-scale patches around ``center``.

    ``sizes`` is ``(native_size, low_size)``; ``low_size`` 0 skips the low
    pathway. One spacing jitter and one rotation are drawn and shared by
    both pathways and the label target, which uses nearest-neighbour lookup.
    """
    native_size, low_size = sizes
    if any(not 0 <= int(c) < n for c, n in zip(center, volume.dims)):
        raise IndexError(f"center {tuple(center)} outside volume {volume.dims}")
    spacing, angles = draw_transforms(rng, config, 1)
    return _augment_many(volume.data[None], labels.data[None] if labels is not None else None,
                         np.zeros(1, dtype=int), np.asarray(center)[None], native_size, low_size,
                         target_size, spacing, angles, volume.spacing, single=True)


def _augment_many(stack, label_stack, images, centers, native_size, low_size, target_size,
                  spacings, angles, source_spacing, single=False):
    c = patch_coords(centers, native_size, 1, spacings, angles, source_spacing)
    native = sample_trilinear(stack, c, images[:, None, None, None]).astype(np.float32)
    low = None
    if low_size:
        c = patch_coords(centers, low_size, 4, spacings, angles, source_spacing)
        low = sample_trilinear(stack, c, images[:, None, None, None]).astype(np.float32)
    target = None
    if label_stack is not None:
        c = patch_coords(centers, target_size, 1, spacings, angles, source_spacing)
        target = sample_nearest(label_stack, c, images[:, None, None, None]).astype(np.int64)
    if single:
        return AugmentedSample(native[0], None if low is None else low[0],
                               None if target is None else target[0], spacings[0], angles[0])
    return native, low, target
