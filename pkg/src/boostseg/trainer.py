"""SGD with Nesterov momentum, the epoch loop, whole-volume inference and
Dice validation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sampler as smp
from .grid import LabelMap, Volume, dice_masks, extract_block
from .net import Batch, Network, cross_entropy
from .synthdata import AugmentConfig


class TrainingError(RuntimeError):
    """Numerical failure during training (non-finite loss or gradient)."""

    def __init__(self, message, epoch=None, iteration=None):
        super().__init__(message)
        self.epoch, self.iteration = epoch, iteration


@dataclass
class OptimizerConfig:
    momentum: float = 0.8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, net: Network) -> "OptimizerState":
        return cls(np.zeros_like(net.weights))


@dataclass
class EpochConfig:
    batches_per_epoch: int = 100
    batch_size: int = 20

    def __post_init__(self):
        if self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("batches_per_epoch and batch_size must be positive")


@dataclass
class MetricsRecord:
    epoch: int
    iteration: int
    learning_rate: float
    train_loss: float
    dice: list[float]
    mean_dice: float
    seconds: float | None = None


def sgd_nesterov_step(net: Network, state: OptimizerState, gradient, lr: float,
                      config: OptimizerConfig, decay_mask=None):
    """One Nesterov step with coupled L2 decay, in place.

    ``g = grad + wd * mask * w``; ``v <- mu v - lr g``; ``w <- w + mu v - lr g``.
    """
    gradient = np.asarray(gradient)
    if not np.all(np.isfinite(gradient)):
        raise TrainingError("non-finite gradient")
    g = gradient
    if config.weight_decay:
        if decay_mask is None:
            decay_mask = net.decay_mask()
        g = g + config.weight_decay * decay_mask * net.weights
    mu = config.momentum
    v = state.velocity
    v *= mu
    v -= lr * g
    net.weights += mu * v - lr * g
    return net, state


# -- inference ----------------------------------------------------------------------

def predict_volume(net: Network, volume: Volume, tile_order=None, batch_tiles: int = 64):
    """Class probabilities ``(nx, ny, nz, K)`` and the argmax ``LabelMap``.

    Single-voxel output networks are evaluated densely (one pass over the
    mirror-padded volume). Otherwise the volume is tiled by the network's
    output region; ``tile_order`` optionally permutes the tile schedule.
    """
    spec = net.spec
    data = volume.data
    if spec.output_region == 1 and tile_order is None:
        probs = net.predict_dense(data)
    else:
        probs = _predict_tiled(net, data, tile_order, batch_tiles)
    labels = LabelMap(np.argmax(probs, axis=-1).astype(np.uint8), spec.num_classes, volume.spacing)
    return probs, labels


def tile_centers(dims, region: int) -> np.ndarray:
    axes = [np.arange(region // 2, n + region - 1 - region // 2, region) for n in dims]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def _predict_tiled(net, data, tile_order, batch_tiles):
    spec = net.spec
    R = spec.output_region
    dims = data.shape
    centers = tile_centers(dims, R)
    if tile_order is not None:
        centers = centers[np.asarray(tile_order)]
    pad = [(0, (-n) % R) for n in dims]
    out = np.zeros(tuple(n + p[1] for n, p in zip(dims, pad)) + (spec.num_classes,), dtype=net.dtype)
    h = R // 2
    for s in range(0, len(centers), batch_tiles):
        chunk = centers[s:s + batch_tiles]
        native = np.stack([extract_block(data, c, spec.native_patch, 1) for c in chunk])
        low = None
        if spec.low is not None:
            low = np.stack([extract_block(data, c, spec.low_patch, 4) for c in chunk])
        probs = net.forward(Batch(native, low), "eval")
        for c, p in zip(chunk, probs):
            out[c[0] - h:c[0] + h + 1, c[1] - h:c[1] + h + 1, c[2] - h:c[2] + h + 1] = p
    return out[:dims[0], :dims[1], :dims[2]]


def validate(net: Network, volumes: list[Volume], labels: list[LabelMap], predict=None) -> dict:
    """Per-class Dice averaged over scans and its mean over foreground classes."""
    if not volumes:
        raise ValueError("validation set is empty")
    K = net.spec.num_classes
    scores = np.zeros((len(volumes), K))
    for i, (v, l) in enumerate(zip(volumes, labels)):
        pred = predict(v) if predict is not None else predict_volume(net, v)[1]
        for k in range(K):
            scores[i, k] = dice_masks(pred.data == k, l.data == k)
    per_class = scores.mean(axis=0)
    return {"per_class": per_class.tolist(), "mean": float(per_class[1:].mean())}


# -- training loop --------------------------------------------------------------------

@dataclass
class Trainer:
    """One training run: network, optimiser state, sampler and data."""

    net: Network
    sampler: smp.SamplerState
    train_volumes: list[Volume]
    train_labels: list[LabelMap]
    val_volumes: list[Volume]
    val_labels: list[LabelMap]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: EpochConfig = field(default_factory=EpochConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    log_wall_time: bool = False

    def __post_init__(self):
        self.opt = OptimizerState.zeros(self.net)
        self.decay_mask = self.net.decay_mask()
        self.epoch = 0
        self.iteration = 0
        self.metrics: list[MetricsRecord] = []
        self.diagnostics: list[dict] = []
        self.reseed(self.seed)

    def reseed(self, seed) -> None:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        a, b = ss.spawn(2)
        self.rng = np.random.default_rng(a)
        self.sampler.reseed(b)

    def next_batch(self) -> Batch:
        spec = self.net.spec
        return smp.sample_batch(self.sampler, self.train_volumes, self.train_labels,
                                self.epochs.batch_size, spec.native_patch, spec.low_patch,
                                spec.output_region, self.augment)

    def train_epoch(self, lr: float) -> float:
        """Run one epoch at learning rate ``lr``; returns the mean batch loss."""
        losses = []
        for _ in range(self.epochs.batches_per_epoch):
            batch = self.next_batch()
            probs = self.net.forward(batch, "train", self.rng)
            loss = cross_entropy(probs, batch.targets)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {self.epoch}, iteration {self.iteration}",
                                    self.epoch, self.iteration)
            grad = self.net.backward(batch.targets)
            try:
                sgd_nesterov_step(self.net, self.opt, grad, lr, self.optimizer, self.decay_mask)
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {self.epoch}, iteration {self.iteration}",
                                    self.epoch, self.iteration) from None
            self.iteration += 1
            losses.append(loss)
        return float(np.mean(losses))

    def refresh_error_maps(self) -> None:
        if self.sampler.mode == smp.BOOSTED:
            smp.update_error_maps(self.sampler, self.net, self.train_volumes, self.train_labels)

    def validate(self) -> dict:
        return validate(self.net, self.val_volumes, self.val_labels)

    def run_epoch(self, lr: float) -> MetricsRecord:
        """Train one epoch, refresh error maps, validate and record metrics."""
        t0 = time.perf_counter()
        loss = self.train_epoch(lr)
        self.refresh_error_maps()
        diag = self.sampler.diagnostics()
        diag["epoch"] = self.epoch
        self.diagnostics.append(diag)
        val = self.validate()
        rec = MetricsRecord(self.epoch, self.iteration, lr, loss, val["per_class"][1:], val["mean"],
                            time.perf_counter() - t0 if self.log_wall_time else None)
        self.metrics.append(rec)
        self.epoch += 1
        return rec

    def fit(self, schedule, epochs: int, period: int | None = None, base_seed: int | None = None,
            run_id: int = 0) -> list[MetricsRecord]:
        """Train for ``epochs`` epochs under ``schedule``.

        With ``period``, the run's random streams are re-derived from
        ``(base_seed, run_id, period_index)`` at each period start, the same
        way population runs are seeded.
        """
        for e in range(epochs):
            if period and e % period == 0:
                self.reseed(run_seed(base_seed if base_seed is not None else self.seed, run_id, e // period))
            self.run_epoch(schedule.lr(self.epoch))
        return self.metrics

    def load_state_from(self, other: "Trainer", momentum: bool = True) -> None:
        self.net.set_weights(other.net.weights)
        if momentum:
            self.opt.velocity[...] = other.opt.velocity
        else:
            self.opt.velocity[...] = 0
        self.sampler.copy_error_maps_from(other.sampler)


def run_seed(base_seed: int, run_id: int, period: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(run_id), int(period)])


# -- CSV output ------------------------------------------------------------------------

def metrics_header(num_classes: int) -> list[str]:
    return (["epoch", "iteration", "lr", "loss"]
            + [f"dice_class_{k}" for k in range(1, num_classes)] + ["mean_dice", "seconds"])


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(records: list[MetricsRecord], num_classes: int, manifest_hash: str | None = None) -> str:
    buf = io.StringIO()
    if manifest_hash:
        buf.write(f"# manifest {manifest_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(num_classes))
    for r in records:
        w.writerow([r.epoch, r.iteration, _fmt(float(r.learning_rate)), _fmt(float(r.train_loss)),
                    *[_fmt(float(d)) for d in r.dice], _fmt(float(r.mean_dice)), _fmt(r.seconds)])
    return buf.getvalue()


def diagnostics_csv(diags: list[dict], manifest_hash: str | None = None) -> str:
    buf = io.StringIO()
    if manifest_hash:
        buf.write(f"# manifest {manifest_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    n = len(diags[0]["mean_error"]) if diags else 0
    w.writerow(["epoch", "candidates", "accepted", "acceptance_rate", "forced"]
               + [f"mean_error_{j}" for j in range(n)])
    for d in diags:
        w.writerow([d["epoch"], d["candidates"], d["accepted"], _fmt(float(d["acceptance_rate"])),
                    d["forced"], *[_fmt(e) for e in d["mean_error"]]])
    return buf.getvalue()


def records_to_dicts(records: list[MetricsRecord]) -> list[dict]:
    return [asdict(r) for r in records]
