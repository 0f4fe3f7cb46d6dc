"""Boosted patch sampling driven by per-voxel training-error maps.

A candidate centre is drawn class-balanced (image, then class present in the
image, then voxel of that class) and accepted with probability equal to the
current error at that voxel, floored at ``error_floor``. The uniform mode
uses the identical candidate stream and accepts everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ErrorMap, LabelMap, Volume, check_pair
from .net import Batch, Network
from .synthdata import AugmentConfig, _augment_many, draw_transforms

BOOSTED = "boosted"
UNIFORM = "uniform"
_BLOCK = 32


class SamplerError(RuntimeError):
    pass


@dataclass
class ClassIndex:
    """Flat (C-order) voxel indices of each class, one entry per image."""

    per_image: list[list[np.ndarray]]

    @classmethod
    def build(cls, labels: list[LabelMap], num_classes: int) -> "ClassIndex":
        per_image = []
        for lab in labels:
            flat = lab.data.ravel()
            order = np.argsort(flat, kind="stable")
            bounds = np.searchsorted(flat[order], np.arange(num_classes + 1))
            per_image.append([order[bounds[k]:bounds[k + 1]] for k in range(num_classes)])
        return cls(per_image)

    def sizes(self) -> np.ndarray:
        return np.array([[len(ix) for ix in img] for img in self.per_image])


@dataclass
class SamplerState:
    mode: str
    error_maps: list[np.ndarray]
    class_index: ClassIndex
    num_classes: int
    error_floor: float = 0.01
    max_rejections: int = 1000
    refresh_fraction: float = 0.25
    cursor: int = 0
    seed: int = 0
    candidates: int = 0
    accepted: int = 0
    forced: int = 0
    _tables: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in (BOOSTED, UNIFORM):
            raise ValueError(f"mode must be {BOOSTED!r} or {UNIFORM!r}")
        if not 0.0 < self.error_floor < 1.0:
            raise ValueError("error_floor must lie in (0, 1)")
        if not 0.0 < self.refresh_fraction <= 1.0:
            raise ValueError("refresh_fraction must lie in (0, 1]")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be positive")
        self._build_tables()
        self.reseed(self.seed)

    def _build_tables(self):
        sizes = self.class_index.sizes()
        if not sizes[:, :].any():
            raise SamplerError("every class index is empty")
        present = [np.flatnonzero(row) for row in sizes]
        n_present = np.array([len(p) for p in present])
        if (n_present == 0).any():
            raise SamplerError("an image has no labelled voxels")
        table = np.zeros((len(present), self.num_classes), dtype=np.int64)
        for j, p in enumerate(present):
            table[j, :len(p)] = p
        flat = np.concatenate([ix for img in self.class_index.per_image for ix in img])
        starts = np.concatenate([[0], np.cumsum(sizes.ravel())[:-1]]).reshape(sizes.shape)
        img_sizes = np.array([e.size for e in self.error_maps])
        img_off = np.concatenate([[0], np.cumsum(img_sizes)[:-1]])
        self._tables = dict(present=table, n_present=n_present, flat=flat,
                            starts=starts, sizes=sizes, img_off=img_off)

    def reseed(self, seed) -> None:
        """Reset the candidate, acceptance and augmentation streams."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        a, b, c = ss.spawn(3)
        self.rng_candidates = np.random.default_rng(a)
        self.rng_accept = np.random.default_rng(b)
        self.rng_augment = np.random.default_rng(c)

    def error_map(self, j: int) -> ErrorMap:
        return ErrorMap(self.error_maps[j])

    def diagnostics(self, reset: bool = True) -> dict:
        d = dict(candidates=self.candidates, accepted=self.accepted, forced=self.forced,
                 acceptance_rate=self.accepted / self.candidates if self.candidates else float("nan"),
                 mean_error=[float(e.mean()) for e in self.error_maps])
        if reset:
            self.candidates = self.accepted = self.forced = 0
        return d

    def copy_error_maps_from(self, other: "SamplerState") -> None:
        self.error_maps = [e.copy() for e in other.error_maps]
        self.cursor = other.cursor


def init_sampler(volumes: list[Volume], labels: list[LabelMap], mode: str = BOOSTED,
                 num_classes: int | None = None, **kwargs) -> SamplerState:
    if not volumes:
        raise ValueError("training set is empty")
    if len(volumes) != len(labels):
        raise ValueError("need one label map per volume")
    for v, l in zip(volumes, labels):
        check_pair(v, l)
    if num_classes is None:
        num_classes = max(l.num_classes for l in labels)
    maps = [np.ones(v.dims, dtype=np.float64) for v in volumes]
    return SamplerState(mode, maps, ClassIndex.build(labels, num_classes), num_classes, **kwargs)


def draw_candidates(state: SamplerState, count: int):
    """``count`` class-balanced candidates: image ids, class ids, flat voxel ids."""
    t = state._tables
    rng = state.rng_candidates
    j = rng.integers(0, len(state.error_maps), size=count)
    k = t["present"][j, (rng.random(count) * t["n_present"][j]).astype(np.int64)]
    pos = (rng.random(count) * t["sizes"][j, k]).astype(np.int64)
    c = t["flat"][t["starts"][j, k] + pos]
    return j, k, c


def candidate_errors(state: SamplerState, j, c) -> np.ndarray:
    err = np.empty(len(j))
    for img in np.unique(j):
        sel = j == img
        err[sel] = state.error_maps[img].ravel()[c[sel]]
    return err


def acceptance_test(state: SamplerState, j, c) -> np.ndarray:
    """Accept iff ``max(E_j(c), floor) > u`` with ``u ~ U[0, 1)``; uniform mode accepts all."""
    if state.mode == UNIFORM:
        return np.ones(len(j), dtype=bool)
    u = state.rng_accept.random(len(j))
    return np.maximum(candidate_errors(state, j, c), state.error_floor) > u


def accept_centers(state: SamplerState, batch_size: int):
    """Run the rejection loop for ``batch_size`` slots.

    Returns image ids and flat centre ids of the accepted candidates.
    """
    images = np.empty(batch_size, dtype=np.int64)
    centers = np.empty(batch_size, dtype=np.int64)
    for slot in range(batch_size):
        tried = 0
        while True:
            block = min(_BLOCK, state.max_rejections - tried)
            j, k, c = draw_candidates(state, block)
            ok = acceptance_test(state, j, c)
            hit = np.flatnonzero(ok)
            if hit.size:
                i = int(hit[0])
                state.candidates += tried + i + 1
                state.accepted += 1
                break
            tried += block
            if tried >= state.max_rejections:
                i = block - 1
                state.candidates += tried
                state.accepted += 1
                state.forced += 1
                break
        images[slot], centers[slot] = j[i], c[i]
    return images, centers


def sample_batch(state: SamplerState, volumes: list[Volume], labels: list[LabelMap],
                 batch_size: int, native_size: int, low_size: int = 0, target_size: int = 1,
                 augment: AugmentConfig | None = None) -> Batch:
    """Assemble one training batch of (augmented) patches and label targets."""
    images, flat = accept_centers(state, batch_size)
    augment = augment or AugmentConfig(enabled=False)
    spacings, angles = draw_transforms(state.rng_augment, augment, batch_size)
    native = np.empty((batch_size,) + (native_size,) * 3, dtype=np.float32)
    low = np.empty((batch_size,) + (low_size,) * 3, dtype=np.float32) if low_size else None
    targets = np.empty((batch_size,) + (target_size,) * 3, dtype=np.int64)
    stack = _stacks(state, volumes, labels)
    if stack is not None:
        vstack, lstack, spacing = stack
        centers = np.stack(np.unravel_index(flat, vstack.shape[1:]), axis=1)
        native, low, targets = _augment_many(vstack, lstack, images, centers, native_size, low_size,
                                             target_size, spacings, angles, spacing)
        return Batch(native, low, targets)
    for img in np.unique(images):
        sel = np.flatnonzero(images == img)
        vol = volumes[img]
        centers = np.stack(np.unravel_index(flat[sel], vol.dims), axis=1)
        nat, lo, tg = _augment_many(vol.data[None], labels[img].data[None],
                                    np.zeros(len(sel), dtype=int), centers, native_size,
                                    low_size, target_size, spacings[sel], angles[sel],
                                    vol.spacing)
        native[sel] = nat
        if low is not None:
            low[sel] = lo
        targets[sel] = tg
    return Batch(native, low, targets)


def _stacks(state, volumes, labels):
    """Stacked training arrays when all images share dims and spacing, else None."""
    key = (id(volumes), id(labels))
    cached = state._tables.get("stack")
    if cached is not None and cached[0] == key:
        return cached[1]
    if len({(v.dims, v.spacing) for v in volumes}) == 1:
        value = (np.stack([v.data for v in volumes]), np.stack([l.data for l in labels]),
                 volumes[0].spacing)
    else:
        value = None
    state._tables["stack"] = (key, value)
    return value


def refresh_indices(state: SamplerState) -> list[int]:
    n = len(state.error_maps)
    count = min(n, math.ceil(state.refresh_fraction * n))
    return [(state.cursor + i) % n for i in range(count)]


def update_error_maps(state: SamplerState, net: Network, volumes: list[Volume],
                      labels: list[LabelMap], predict=None) -> SamplerState:
    """Refresh the next round-robin subset of error maps as ``1 - p(true class)``."""
    if predict is None:
        from .trainer import predict_volume

        def predict(v):
            return predict_volume(net, v)[0]

    chosen = refresh_indices(state)
    for j in chosen:
        probs = predict(volumes[j])
        lab = labels[j].data.astype(np.intp)
        p_true = np.take_along_axis(probs, lab[..., None], axis=-1)[..., 0]
        state.error_maps[j] = np.clip(1.0 - p_true.astype(np.float64), 0.0, 1.0)
    state.cursor = (state.cursor + len(chosen)) % len(state.error_maps)
    return state
