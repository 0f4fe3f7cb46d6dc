"""Desk-scale reproductions of the sampler and learning-rate comparisons.

Each study trains through :func:`experiment.compare` and returns a
JSON-ready summary. Finished studies are cached under a key built from the
study's configs and a hash of the numeric modules, so rerunning with
unchanged code reuses the runs instead of training again.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import experiment as ex
from . import sampler as smp
from .net import load_checkpoint

DEFAULT_CACHE = Path("results")

# two-class sparse task: 16 train / 4 val scans, batch 20, constant 0.001, 100-batch epochs
ISAMPLE_OVERRIDES = {
    "num_scans": 20,
    "split": [0.8, 0.2, 0.0],
    "epochs": {"batches_per_epoch": 100, "batch_size": 20},
    "schedule": {"kind": "constant", "rate": 0.001, "warmup": 10},
    "total_epochs": 200,
}

# handcrafted step schedules compared against the AutoLR population
STEP_GRID = (0.02, 0.01, 0.005)
STEP_DECAY, STEP_LENGTH = 0.5, 20


# modules whose code changes the numbers a study produces
NUMERIC_MODULES = ("grid", "synthdata", "net", "sampler", "trainer", "autolr", "experiment")


def source_hash() -> str:
    h = hashlib.sha256()
    for p in (Path(__file__).parent / f"{m}.py" for m in NUMERIC_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached(name: str, key: dict, fn, cache_dir=DEFAULT_CACHE, fresh: bool = False) -> dict:
    """Return ``fn(run_dir)`` for this key, reusing a stored result if one exists."""
    h = ex.config_hash({"key": key, "source": source_hash()})
    run_dir = Path(cache_dir) / name / h
    summary = run_dir / "summary.json"
    if summary.exists() and not fresh:
        return json.loads(summary.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)
    out = fn(run_dir)
    out["cache_key"] = h
    out["run_dir"] = str(run_dir)
    summary.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def _curves(comp: ex.Comparison) -> dict:
    return {lab: {"iteration": comp.iterations(lab).astype(int).tolist(),
                  "mean_dice": comp.mean_curve(lab).tolist(), "sd_dice": comp.sd_curve(lab).tolist()}
            for lab in comp.labels}


def isample_configs(epochs: int = 200, overrides: dict | None = None) -> list[ex.ExperimentConfig]:
    d = ex.deep_merge(dict(ISAMPLE_OVERRIDES, total_epochs=epochs), overrides or {})
    base = ex.ExperimentConfig.resolve(d, "kidney2class")
    return [base.replace(sampler={"mode": smp.BOOSTED}), base.replace(sampler={"mode": smp.UNIFORM})]


def isample_study(seeds: int = 3, epochs: int = 200, cache_dir=DEFAULT_CACHE, fresh: bool = False,
                  workers: int | None = None, overrides: dict | None = None) -> dict:
    """Boosted vs uniform sampling on the sparse two-class task.

    The threshold is 90% of the uniform baseline's final seed-mean Dice;
    the summary reports the iterations each sampler needs to reach it.
    """
    configs = isample_configs(epochs, overrides)

    def run(run_dir):
        comp = ex.compare(configs, ["boosted", "uniform"], seeds, run_dir, workers)
        (run_dir / "curves.csv").write_text(comp.curves_csv())
        final_u = float(comp.mean_curve("uniform")[-1])
        threshold = 0.9 * final_u
        return {
            "seeds": comp.seeds,
            "final": {lab: float(comp.mean_curve(lab)[-1]) for lab in comp.labels},
            "threshold": threshold,
            "iterations_to_threshold": {lab: comp.iterations_to(lab, threshold) for lab in comp.labels},
            "iterations_to_0.8": {lab: comp.iterations_to(lab, 0.8) for lab in comp.labels},
            "curves": _curves(comp),
            "boosted_checkpoint": str(run_dir / "boosted" / f"seed{comp.seeds[0]}" / "final.ckpt"),
        }

    return cached("isample", {"configs": [c.to_dict() for c in configs], "seeds": seeds}, run,
                  cache_dir, fresh)


def autolr_configs(overrides: dict | None = None) -> tuple[list[ex.ExperimentConfig], list[str]]:
    base = ex.ExperimentConfig.resolve(overrides or {}, "multiclass")
    configs, labels = [base], ["autolr"]
    for rate in STEP_GRID:
        configs.append(base.replace(schedule={"kind": "step", "rate": rate, "decay": STEP_DECAY,
                                              "step": STEP_LENGTH, "warmup": 10}))
        labels.append(f"step_{rate:g}")
    return configs, labels


def autolr_study(seeds: int = 3, cache_dir=DEFAULT_CACHE, fresh: bool = False, workers: int | None = None,
                 overrides: dict | None = None) -> dict:
    """AutoLR population against a small grid of handcrafted step schedules."""
    configs, labels = autolr_configs(overrides)

    def run(run_dir):
        comp = ex.compare(configs, labels, seeds, run_dir, workers)
        (run_dir / "curves.csv").write_text(comp.curves_csv())
        final = {lab: float(comp.mean_curve(lab)[-1]) for lab in labels}
        best = max(labels[1:], key=lambda lab: final[lab])
        paths = {}
        for s in comp.seeds:
            lines = (run_dir / "autolr" / f"seed{s}" / "population_log.csv").read_text().splitlines()[2:]
            paths[str(s)] = [float(row.split(",")[2]) for row in lines]
        return {"seeds": comp.seeds, "final": final, "best_handcrafted": best,
                "gap": final[best] - final["autolr"], "winner_rates": paths, "curves": _curves(comp)}

    return cached("autolr", {"configs": [c.to_dict() for c in configs], "seeds": seeds}, run,
                  cache_dir, fresh)


def boundary_shell(labels: np.ndarray):
    """Foreground voxels with a background 6-neighbour, and the remaining object interior."""
    fg = labels > 0
    inner = ndimage.binary_erosion(fg, ndimage.generate_binary_structure(3, 1), border_value=1)
    return fg & ~inner, inner


def error_map_study(checkpoint, cfg: ex.ExperimentConfig, scan: int = 0, out_dir=None) -> dict:
    """Error map of a trained network on one training phantom.

    Reports the volume mean, the mean over the one-voxel boundary shell of
    the foreground objects and the mean over the object interiors.
    """
    net, _, _ = load_checkpoint(checkpoint)
    data = ex.build_dataset(cfg)
    vol, lab = data.volumes["train"][scan], data.labels["train"][scan]
    state = smp.init_sampler([vol], [lab], smp.BOOSTED, cfg.phantom.num_classes, refresh_fraction=1.0)
    smp.update_error_maps(state, net, [vol], [lab])
    e = state.error_maps[0]
    shell, interior = boundary_shell(lab.data)
    halo = ndimage.binary_dilation(lab.data > 0) & ~(lab.data > 0)
    out = {"scan": data.names["train"][scan], "mean_error": float(e.mean()),
           "shell_error": float(e[shell].mean()), "interior_error": float(e[interior].mean()),
           "outer_shell_error": float(e[halo].mean()),
           "shell_voxels": int(shell.sum()), "interior_voxels": int(interior.sum())}
    out["shell_ratio"] = out["shell_error"] / max(out["interior_error"], 1e-12)
    if out_dir is not None:
        ex.export_error_maps(state, [out["scan"]], out_dir, vol.spacing)
    return out
