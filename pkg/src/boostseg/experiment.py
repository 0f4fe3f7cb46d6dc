"""Declarative experiments: dataset generation, training runs (single
schedule or AutoLR population), evaluation and multi-seed comparison.

Every artefact written here is a deterministic function of the resolved
config and seed. CSVs start with a ``# manifest <hash>`` comment naming the
run manifest that produced them.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import sampler as smp
from .autolr import (PopulationConfig, Schedule, population_log_csv, run_autolr,
                     schedule_from_dict)
from .grid import (ErrorMap, LabelMap, Volume, dice_masks, largest_component_labels, load_labels,
                   load_volume, save_error_map, save_labels, save_volume)
from .net import NetworkSpec, conv, glorot_init, load_checkpoint, save_checkpoint
from .synthdata import AugmentConfig, NormalizeConfig, PhantomConfig, generate_phantom, normalize
from .trainer import (EpochConfig, OptimizerConfig, Trainer, diagnostics_csv, metrics_csv,
                      predict_volume)

ENV_OUTPUT_DIR = "BOOSTSEG_OUTPUT_DIR"
ENV_WORKERS = "BOOSTSEG_WORKERS"
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# -- config ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    mode: str = smp.BOOSTED
    error_floor: float = 0.01
    max_rejections: int = 1000
    refresh_fraction: float = 0.25

    def __post_init__(self):
        if self.mode not in (smp.BOOSTED, smp.UNIFORM):
            raise ConfigError(f"sampler mode must be {smp.BOOSTED!r} or {smp.UNIFORM!r}")
        if not 0.0 < self.error_floor < 1.0:
            raise ConfigError("error_floor must lie in (0, 1)")
        if not 0.0 < self.refresh_fraction <= 1.0:
            raise ConfigError("refresh_fraction must lie in (0, 1]")
        if self.max_rejections < 1:
            raise ConfigError("max_rejections must be positive")


def _default_network():
    return {"native": {"layers": [conv(4).__dict__] * 4},
            "low": {"layers": [conv(4).__dict__] * 2},
            "hidden": [16], "dropout": 0.5, "num_classes": 2, "output_region": 1}


DEFAULTS = {
    "phantom": PhantomConfig().to_dict(),
    "num_scans": 20,
    "split": [0.7, 0.1, 0.2],
    "network": _default_network(),
    "optimizer": {"momentum": 0.8, "weight_decay": 1e-4},
    "epochs": {"batches_per_epoch": 100, "batch_size": 20},
    "sampler": {"mode": "boosted", "error_floor": 0.01, "max_rejections": 1000, "refresh_fraction": 0.25},
    "schedule": {"kind": "constant", "rate": 0.001, "warmup": 10},
    "augment": {"base_spacing": [1.0, 1.0, 1.5], "spacing_jitter": 0.1,
                "rotation_ranges": [10.0, 4.0, 4.0], "enabled": True},
    "normalize": {"clamp_lo": -1000.0, "clamp_hi": 1000.0, "divisor": 218.0},
    "total_epochs": 200,
    "seed": 0,
    "output_dir": "runs/default",
    "log_wall_time": False,
}

PRESETS = {
    # two-class sparse organ task at learning rate 0.001 and batch 20
    "kidney2class": {},
    # four classes, batch 40, three-run AutoLR population
    "multiclass": {
        "phantom": {"dims": [48, 48, 48], "num_classes": 4, "intensity_means": [0.0, 150.0, 260.0, 370.0],
                    "foreground_fraction_target": 0.012, "blobs_per_class": 1, "distractor_class": 1},
        "network": {"num_classes": 4},
        "epochs": {"batches_per_epoch": 50, "batch_size": 40},
        "schedule": {"kind": "autolr", "runs": [{"rate": 0.05, "factor": 2.0}, {"rate": 0.01, "factor": 1.0},
                                                {"rate": 0.005, "factor": 0.5}],
                     "period": 20, "warmup": 10, "reset_momentum": False},
        "total_epochs": 60,
        "output_dir": "runs/multiclass",
    },
}
PRESETS["kidney2class"] = {"output_dir": "runs/kidney2class"}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "schedule":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig
    num_scans: int
    split: tuple[float, float, float]
    network: NetworkSpec
    optimizer: OptimizerConfig
    epochs: EpochConfig
    sampler: SamplerConfig
    schedule: dict
    augment: AugmentConfig
    normalize: NormalizeConfig
    total_epochs: int
    seed: int
    output_dir: str
    log_wall_time: bool = False
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @staticmethod
    def layered(overrides: dict | None = None, preset: str | None = None) -> dict:
        """Defaults, then the preset, then ``overrides``, as an unvalidated dict."""
        d = DEFAULTS
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            d = deep_merge(d, PRESETS[preset])
        if overrides:
            unknown = set(overrides) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config keys {sorted(unknown)}")
            d = deep_merge(d, overrides)
        return copy.deepcopy(d)

    @classmethod
    def resolve(cls, overrides: dict | None = None, preset: str | None = None) -> "ExperimentConfig":
        """Defaults, then the preset, then ``overrides``; validated."""
        return cls.from_dict(cls.layered(overrides, preset))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = deep_merge(DEFAULTS, d)
        try:
            phantom = PhantomConfig(**d["phantom"])
            net = dict(d["network"])
            net.setdefault("num_classes", phantom.num_classes)
            network = NetworkSpec.from_dict(net)
            cfg = cls(phantom=phantom, num_scans=int(d["num_scans"]),
                      split=tuple(float(s) for s in d["split"]), network=network,
                      optimizer=OptimizerConfig(**d["optimizer"]), epochs=EpochConfig(**d["epochs"]),
                      sampler=SamplerConfig(**d["sampler"]), schedule=dict(d["schedule"]),
                      augment=AugmentConfig(**d["augment"]), normalize=NormalizeConfig(**d["normalize"]),
                      total_epochs=int(d["total_epochs"]), seed=int(d["seed"]),
                      output_dir=str(d["output_dir"]), log_wall_time=bool(d["log_wall_time"]))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.raw = d
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0):
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if self.network.num_classes != self.phantom.num_classes:
            raise ConfigError("network and phantom disagree on num_classes")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be positive")
        split_counts(self.num_scans, self.split)
        self.make_schedule()
        if self.is_population and self.total_epochs % self.population.period:
            raise ConfigError("total_epochs must be a multiple of the AutoLR period")

    @property
    def is_population(self) -> bool:
        return self.schedule.get("kind") == "autolr"

    @property
    def population(self) -> PopulationConfig:
        s = dict(self.schedule)
        s.pop("kind")
        return PopulationConfig(**s)

    def make_schedule(self) -> Schedule | PopulationConfig:
        try:
            if self.is_population:
                return self.population
            return schedule_from_dict(self.schedule)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule: {exc}") from exc

    def to_dict(self) -> dict:
        d = {
            "phantom": self.phantom.to_dict(),
            "num_scans": self.num_scans,
            "split": list(self.split),
            "network": self.network.to_dict(),
            "optimizer": vars(self.optimizer).copy(),
            "epochs": vars(self.epochs).copy(),
            "sampler": vars(self.sampler).copy(),
            "schedule": dict(self.schedule),
            "augment": vars(self.augment).copy(),
            "normalize": vars(self.normalize).copy(),
            "total_epochs": self.total_epochs,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "log_wall_time": self.log_wall_time,
        }
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(deep_merge(self.to_dict(), changes))

    def dataset_key(self) -> dict:
        """Config fields that determine the generated dataset."""
        return {"phantom": self.phantom.to_dict(), "num_scans": self.num_scans, "split": list(self.split)}


def load_config(path, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_config_dict(path, preset, overrides))


def load_config_dict(path, preset: str | None = None, overrides: dict | None = None) -> dict:
    try:
        text = Path(path).read_text()
        d = json.loads(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    preset = d.pop("preset", preset)
    if overrides:
        d = deep_merge(d, overrides)
    return ExperimentConfig.layered(d, preset)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Largest-remainder split of ``n`` scans; every non-zero fraction gets >= 1."""
    if n < 1:
        raise ConfigError("num_scans must be positive")
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    for f, c, name in zip(fractions, counts, SPLITS):
        if f > 0 and c == 0:
            raise ConfigError(f"{n} scans cannot fill the {name} split at fraction {f}")
    if counts[0] == 0:
        raise ConfigError("the train split is empty")
    return tuple(counts)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- data -------------------------------------------------------------------------------

@dataclass
class Dataset:
    names: dict[str, list[str]]
    volumes: dict[str, list[Volume]]
    labels: dict[str, list[LabelMap]]
    files: dict[str, str] = field(default_factory=dict)


def scan_seed(phantom_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(phantom_seed), int(index)]).generate_state(1)[0])


def _scan_config(cfg: ExperimentConfig, i: int) -> PhantomConfig:
    d = cfg.phantom.to_dict()
    d["seed"] = scan_seed(cfg.phantom.seed, i)
    return PhantomConfig(**d)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Generate phantoms in memory (raw intensities are normalised here)."""
    counts = split_counts(cfg.num_scans, cfg.split)
    names, vols, labs = {}, {}, {}
    i = 0
    for split, count in zip(SPLITS, counts):
        names[split], vols[split], labs[split] = [], [], []
        for _ in range(count):
            v, l = generate_phantom(_scan_config(cfg, i))
            names[split].append(f"scan_{i:03d}")
            vols[split].append(normalize(v, cfg.normalize))
            labs[split].append(l)
            i += 1
    return Dataset(names, vols, labs)


def generate_data(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Write phantoms, labels, split lists and provenance sidecars."""
    out = Path(out_dir or Path(cfg.output_dir) / "data")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    counts = split_counts(cfg.num_scans, cfg.split)
    i = 0
    for split, count in zip(SPLITS, counts):
        listed = []
        for _ in range(count):
            pc = _scan_config(cfg, i)
            v, l = generate_phantom(pc)
            name = f"scan_{i:03d}"
            save_volume(out / f"{name}_image.bvol", v)
            save_labels(out / f"{name}_labels.bvol", l)
            (out / f"{name}.json").write_text(json.dumps(
                {"name": name, "index": i, "split": split, "phantom": pc.to_dict(),
                 "foreground_voxels": int((l.data > 0).sum()), "version": __version__},
                indent=2, sort_keys=True) + "\n")
            listed.append(name)
            i += 1
        (out / f"{split}.txt").write_text("".join(n + "\n" for n in listed))
    (out / "dataset.json").write_text(json.dumps(cfg.dataset_key(), indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir, cfg: ExperimentConfig) -> Dataset:
    data_dir = Path(data_dir)
    if not (data_dir / "train.txt").exists():
        raise ConfigError(f"no dataset at {data_dir} (run generate-data first)")
    meta = data_dir / "dataset.json"
    if meta.exists() and json.loads(meta.read_text()) != json.loads(json.dumps(cfg.dataset_key())):
        raise ConfigError(f"dataset at {data_dir} was generated from a different phantom/split config")
    names, vols, labs, files = {}, {}, {}, {}
    for split in SPLITS:
        listed = [s for s in (data_dir / f"{split}.txt").read_text().split() if s]
        names[split], vols[split], labs[split] = listed, [], []
        for name in listed:
            img, lab = data_dir / f"{name}_image.bvol", data_dir / f"{name}_labels.bvol"
            vols[split].append(normalize(load_volume(img), cfg.normalize))
            labs[split].append(load_labels(lab, cfg.phantom.num_classes))
            files[img.name], files[lab.name] = file_hash(img), file_hash(lab)
    return Dataset(names, vols, labs, files)


def dataset_for(cfg: ExperimentConfig, data_dir=None) -> Dataset:
    if data_dir is not None:
        return load_dataset(data_dir, cfg)
    return build_dataset(cfg)


# -- manifests ------------------------------------------------------------------------

@dataclass(frozen=True)
class RunManifest:
    config: dict
    version: str
    files: dict

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "version": self.version, "files": self.files},
                          indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        if path.exists() and path.read_text() != self.to_json():
            raise ConfigError(f"{path} exists and belongs to a different run")
        path.write_text(self.to_json())
        return path


# -- training -----------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ExperimentConfig
    manifest: RunManifest
    records: list
    trainer: Trainer
    population: object = None
    out_dir: Path | None = None

    @property
    def mean_dice(self) -> list[float]:
        return [r.mean_dice for r in self.records]

    @property
    def iterations(self) -> list[int]:
        return [r.iteration for r in self.records]


def make_trainer(cfg: ExperimentConfig, data: Dataset, init_seed: int, seed) -> Trainer:
    net = glorot_init(cfg.network, init_seed)
    s = cfg.sampler
    sampler = smp.init_sampler(data.volumes["train"], data.labels["train"], s.mode,
                               cfg.phantom.num_classes, error_floor=s.error_floor,
                               max_rejections=s.max_rejections, refresh_fraction=s.refresh_fraction)
    val_v, val_l = data.volumes["val"], data.labels["val"]
    if not val_v:
        raise ConfigError("the validation split is empty")
    return Trainer(net, sampler, data.volumes["train"], data.labels["train"], val_v, val_l,
                   cfg.optimizer, cfg.epochs, cfg.augment, seed, cfg.log_wall_time)


def train(cfg: ExperimentConfig, data: Dataset | None = None, out_dir=None, data_dir=None,
          callback=None) -> RunResult:
    """Train one configuration; writes artefacts when ``out_dir`` is given."""
    if data is None:
        data = dataset_for(cfg, data_dir)
    manifest = RunManifest(cfg.to_dict(), __version__, dict(sorted(data.files.items())))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.write(out_dir)
    population = None
    if cfg.is_population:
        pop = cfg.population

        def factory(run_id):
            # all runs start from the same initial weights
            return make_trainer(cfg, data, cfg.seed, [cfg.seed, run_id])

        population = run_autolr(pop, factory, cfg.total_epochs, cfg.seed, callback)
        trainer = population.final_trainer
        records = trainer.metrics
    else:
        schedule = cfg.make_schedule()
        trainer = make_trainer(cfg, data, cfg.seed, cfg.seed)
        for e in range(cfg.total_epochs):
            rec = trainer.run_epoch(schedule.lr(e))
            if callback is not None:
                callback(e, trainer, rec)
        records = trainer.metrics
    result = RunResult(cfg, manifest, records, trainer, population, out_dir)
    if out_dir is not None:
        write_run(result)
    return result


def write_run(result: RunResult) -> None:
    out, h, K = result.out_dir, result.manifest.hash, result.config.phantom.num_classes
    if result.population is not None:
        pop = result.population
        for run in pop.runs:
            (out / f"metrics_run{run.run_id}.csv").write_text(metrics_csv(pop.metrics[run.run_id], K, h))
            (out / f"diagnostics_run{run.run_id}.csv").write_text(diagnostics_csv(run.trainer.diagnostics, h))
        (out / "population_log.csv").write_text(population_log_csv(pop.log, h))
        lines = [f"# manifest {h}", "epoch,lr"] + [f"{e},{lr!r}" for e, lr in enumerate(pop.lr_path)]
        (out / "lr_path.csv").write_text("\n".join(lines) + "\n")
        for entry, net in zip(pop.log, getattr(pop, "winners", [])):
            save_checkpoint(out / f"winner_period{entry['period']}.ckpt", net[0], net[1],
                            {"period": entry["period"], "winner": entry["winner"]})
    (out / "metrics.csv").write_text(metrics_csv(result.records, K, h))
    (out / "diagnostics.csv").write_text(diagnostics_csv(result.trainer.diagnostics, h))
    t = result.trainer
    save_checkpoint(out / "final.ckpt", t.net, t.opt.velocity,
                    {"epoch": t.epoch, "iteration": t.iteration, "manifest": h})


# -- evaluation ---------------------------------------------------------------------------

def evaluate(net, volumes: list[Volume], labels: list[LabelMap], names: list[str],
             postprocess: bool = False) -> list[dict]:
    """Per-scan, per-class Dice, optionally after largest-component filtering."""
    K = net.spec.num_classes
    rows = []
    for name, v, l in zip(names, volumes, labels):
        if v.dims != l.dims:
            raise ConfigError(f"{name}: volume and label dims differ")
        pred = predict_volume(net, v)[1]
        if postprocess:
            pred = largest_component_labels(pred)
        d = [dice_masks(pred.data == k, l.data == k) for k in range(1, K)]
        rows.append({"scan": name, "dice": d, "mean": float(np.mean(d))})
    return rows


def evaluation_csv(rows: list[dict], num_classes: int, manifest_hash: str | None = None) -> str:
    lines = [f"# manifest {manifest_hash}"] if manifest_hash else []
    lines.append(",".join(["scan"] + [f"dice_class_{k}" for k in range(1, num_classes)] + ["mean_dice"]))
    for r in rows:
        lines.append(",".join([r["scan"]] + [repr(float(x)) for x in r["dice"]] + [repr(float(r["mean"]))]))
    if rows:
        per_class = np.mean([r["dice"] for r in rows], axis=0)
        lines.append(",".join(["mean"] + [repr(float(x)) for x in per_class]
                              + [repr(float(per_class.mean()))]))
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(ckpt, cfg: ExperimentConfig, split: str = "test", postprocess: bool = False,
                        data_dir=None) -> list[dict]:
    net, _, _ = load_checkpoint(ckpt)
    if net.spec.to_dict() != cfg.network.to_dict():
        raise ConfigError(f"checkpoint {ckpt} was built for a different network spec")
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    data = dataset_for(cfg, data_dir)
    if not data.volumes[split]:
        raise ConfigError(f"the {split} split is empty")
    return evaluate(net, data.volumes[split], data.labels[split], data.names[split], postprocess)


def export_error_maps(sampler: smp.SamplerState, names: list[str], out_dir, spacing) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, name in enumerate(names):
        p = out / f"{name}_error.bvol"
        save_error_map(p, ErrorMap(sampler.error_maps[j]), spacing)
        paths.append(p)
    return paths


# -- comparison ---------------------------------------------------------------------------

COMPARE_AXES = ("sampler", "schedule")
_NEUTRAL = ("output_dir", "log_wall_time")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def compared_axis(configs: list[ExperimentConfig]) -> str | None:
    """The single axis the configs vary along, or None if they are identical.

    Raises ConfigError when they differ anywhere else (confound guard).
    Only ``sampler.mode`` varies on the sampler axis; the schedule axis may
    change any schedule field.
    """
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    flat = [_flatten({k: v for k, v in c.to_dict().items() if k not in _NEUTRAL}) for c in configs]
    keys = set().union(*flat)
    diff = sorted(k for k in keys if len({json.dumps(f.get(k), sort_keys=True) for f in flat}) > 1)
    if not diff:
        return None
    if all(k.startswith("schedule.") for k in diff):
        return "schedule"
    if diff == ["sampler.mode"]:
        return "sampler"
    raise ConfigError(f"configs differ outside a single compared axis: {diff}")


def seed_list(base: int, count: int) -> list[int]:
    return [int(base) + i for i in range(count)]


def _run_one(args):
    cfg_dict, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    res = train(cfg, out_dir=out_dir)
    return [(r.epoch, r.iteration, r.learning_rate, r.train_loss, r.mean_dice) for r in res.records]


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(ENV_WORKERS)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{ENV_WORKERS} must be >= 1")
    return n


@dataclass
class Comparison:
    labels: list[str]
    axis: str | None
    seeds: list[int]
    curves: dict  # label -> array (seeds, epochs, 5)

    def mean_curve(self, label, column=4):
        return self.curves[label][:, :, column].mean(axis=0)

    def sd_curve(self, label, column=4):
        return self.curves[label][:, :, column].std(axis=0)

    def iterations(self, label):
        return self.curves[label][0, :, 1]

    def iterations_to(self, label, threshold: float):
        """First iteration count at which the seed-mean Dice curve reaches ``threshold``."""
        m = self.mean_curve(label)
        hit = np.flatnonzero(m >= threshold)
        return int(self.iterations(label)[hit[0]]) if hit.size else None

    def curves_csv(self, manifest_hash: str | None = None) -> str:
        lines = [f"# manifest {manifest_hash}"] if manifest_hash else []
        cols = ["epoch", "iteration"]
        for lab in self.labels:
            cols += [f"{lab}_dice_mean", f"{lab}_dice_sd", f"{lab}_loss_mean", f"{lab}_loss_sd"]
        lines.append(",".join(cols))
        n = min(c.shape[1] for c in self.curves.values())
        first = self.curves[self.labels[0]]
        for e in range(n):
            row = [str(int(first[0, e, 0])), str(int(first[0, e, 1]))]
            for lab in self.labels:
                c = self.curves[lab][:, e]
                row += [repr(float(c[:, 4].mean())), repr(float(c[:, 4].std())),
                        repr(float(c[:, 3].mean())), repr(float(c[:, 3].std()))]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def summary_csv(self, threshold: float, manifest_hash: str | None = None) -> str:
        lines = [f"# manifest {manifest_hash}"] if manifest_hash else []
        lines.append(f"config,final_dice_mean,final_dice_sd,iterations_to_dice_{threshold:g}")
        for lab in self.labels:
            it = self.iterations_to(lab, threshold)
            lines.append(",".join([lab, repr(float(self.mean_curve(lab)[-1])),
                                   repr(float(self.sd_curve(lab)[-1])), "" if it is None else str(it)]))
        return "\n".join(lines) + "\n"


def compare(configs: list[ExperimentConfig], labels: list[str] | None = None, seeds: int = 3,
            out_dir=None, workers: int | None = None) -> Comparison:
    """Train every config over ``seeds`` seeds and align their metric curves."""
    axis = compared_axis(configs)
    labels = labels or [f"config{i}" for i in range(len(configs))]
    if len(set(labels)) != len(labels):
        raise ConfigError("comparison labels must be unique")
    seed_values = seed_list(configs[0].seed, seeds)
    jobs = []
    for lab, cfg in zip(labels, configs):
        for s in seed_values:
            d = cfg.to_dict()
            d["seed"] = s
            run_dir = None if out_dir is None else str(Path(out_dir) / lab / f"seed{s}")
            jobs.append((d, run_dir))
    workers = workers or workers_from_env()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    curves = {}
    for i, lab in enumerate(labels):
        rows = results[i * seeds:(i + 1) * seeds]
        curves[lab] = np.array(rows, dtype=np.float64)
    return Comparison(labels, axis, seed_values, curves)
