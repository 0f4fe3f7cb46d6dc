"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Criteria 6, 7 and 10 train for about two hours on one CPU. Their results
are cached under ``results/`` keyed by config and package source hash, so
a rerun with unchanged code only re-evaluates them. Set
``BOOSTSEG_FRESH=1`` to force retraining.

Run as ``pytest tests/test_acceptance.py -v`` or as a script.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from boostseg import autolr as al
from boostseg import reproduce as rp
from boostseg import sampler as smp
from boostseg import trainer as tr
from boostseg.grid import dice_masks, largest_component
from boostseg.net import NetworkSpec, PathwaySpec, conv, glorot_init, load_checkpoint, save_checkpoint
from boostseg.synthdata import PhantomConfig, generate_phantom, normalize
from conftest import record
from gradcheck import GRAD_CASES, grad_check

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / "results"
FRESH = os.environ.get("BOOSTSEG_FRESH") == "1"


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst, kinks, largest = 0.0, 0, 0
    for spec, seed, n in GRAD_CASES.values():
        count, k, err = grad_check(spec, seed, n)
        worst, kinks, largest = max(worst, err), kinks + k, max(largest, count)
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and kinks == 0 and largest <= 5000 and secs < 60
    record(1, ok, f"max rel err {worst:.2e} over {len(GRAD_CASES)} nets (up to {largest} params), {secs:.1f} s")
    assert ok


def test_criterion_02_acceptance_law():
    t0 = time.perf_counter()
    v, l = generate_phantom(PhantomConfig(dims=(16, 16, 16), foreground_fraction_target=0.03, seed=0))
    details, ok = [], True
    for p in (0.1, 0.3, 0.9):
        s = smp.init_sampler([normalize(v)], [l], seed=int(p * 1000))
        s.error_maps = [np.full(l.dims, p)]
        j, _, c = smp.draw_candidates(s, 10_000)
        rate = float(smp.acceptance_test(s, j, c).mean())
        bound = 3 * math.sqrt(p * (1 - p) / 10_000)
        ok &= abs(rate - p) <= bound
        details.append(f"p={p}: {rate:.4f} (+-{bound:.4f})")
    secs = time.perf_counter() - t0
    ok &= secs < 10
    record(2, ok, "; ".join(details) + f", {secs:.2f} s")
    assert ok


def test_criterion_03_error_map_formula():
    v, l = generate_phantom(PhantomConfig(dims=(16, 16, 16), foreground_fraction_target=0.03, seed=4))
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(16, 16, 16, 2))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    s = smp.init_sampler([normalize(v)], [l])
    smp.update_error_maps(s, None, [normalize(v)], [l], predict=lambda vol: probs)
    p_true = np.where(l.data == 1, probs[..., 1], probs[..., 0])
    ok = bool(np.array_equal(s.error_maps[0], 1.0 - p_true))
    record(3, ok, f"E == 1 - p_true bitwise on 16^3 ({l.data.sum()} foreground voxels)")
    assert ok


class ScriptedValidation(tr.Trainer):
    """Real trainer whose validation score is scripted to favour the 0.05 run."""

    def validate(self):
        lr = self.metrics_lr
        return {"per_class": [1.0, lr], "mean": lr}

    def run_epoch(self, lr):
        self.metrics_lr = lr
        return super().run_epoch(lr)


def test_criterion_04_autolr_worked_example():
    vols, labs = [], []
    for s in range(3):
        v, l = generate_phantom(PhantomConfig(dims=(16, 16, 16), foreground_fraction_target=0.03, seed=s))
        vols.append(normalize(v))
        labs.append(l)
    spec = NetworkSpec(PathwaySpec([conv(3), conv(3)]), PathwaySpec([conv(3)]), hidden=[6])
    cfg = al.PopulationConfig(period=11)
    runs = []
    for i, r in enumerate(cfg.runs):
        t = ScriptedValidation(glorot_init(spec, 0), smp.init_sampler(vols[:2], labs[:2]), vols[:2], labs[:2],
                               vols[2:], labs[2:], epochs=tr.EpochConfig(2, 4))
        runs.append(al.RunState(i, r.factor, al.RunSchedule(r.rate), t, period_length=cfg.period))
    for run in runs:
        run.trainer.reseed(tr.run_seed(0, run.run_id, 0))
        for e in range(cfg.period):
            al.record_validation(run, e, run.trainer.run_epoch(run.schedule.lr(e)).mean_dice)
    best = al.select_best(runs)
    winner = runs[best].trainer
    al.evolve(runs, best, cfg.period)
    rates = tuple(r.rate for r in runs)
    clones = all(np.array_equal(r.trainer.net.weights, winner.net.weights)
                 and np.array_equal(r.trainer.opt.velocity, winner.opt.velocity) for r in runs)
    ok = best == 0 and rates == (0.1, 0.05, 0.025) and clones
    record(4, ok, f"winner eta={cfg.runs[best].rate}, new rates {rates}, bitwise clones {clones}")
    assert ok


def test_criterion_05_warmup_table():
    eta = 0.001
    table = {0: eta / 10, 4: eta / 2, 10: eta, 11: eta, 50: eta}
    got = {e: al.effective_lr(eta, e, 10) for e in table}
    ok = all(got[e] == table[e] for e in table)
    record(5, ok, "effective_lr " + ", ".join(f"e={e}->{got[e]:g}" for e in table))
    assert ok


@pytest.fixture(scope="module")
def isample():
    return rp.isample_study(seeds=3, cache_dir=CACHE, fresh=FRESH)


def test_criterion_06_isample_benefit(isample):
    it = isample["iterations_to_threshold"]
    b, u = it["boosted"], it["uniform"]
    ok = b is not None and u is not None and b <= 0.5 * u
    final = isample["final"]
    record(6, ok, f"threshold {isample['threshold']:.3f} (0.9 x uniform final {final['uniform']:.3f}): "
                  f"boosted {b} vs uniform {u} iterations; finals boosted {final['boosted']:.3f} "
                  f"uniform {final['uniform']:.3f}; to Dice 0.8: {isample['iterations_to_0.8']}")
    assert ok


def test_criterion_07_autolr_competitive():
    res = rp.autolr_study(seeds=3, cache_dir=CACHE, fresh=FRESH)
    final = res["final"]
    ok = res["gap"] <= 0.02
    record(7, ok, f"AutoLR final {final['autolr']:.3f} vs best handcrafted {res['best_handcrafted']} "
                  f"{final[res['best_handcrafted']]:.3f} (gap {res['gap']:+.3f}); "
                  + ", ".join(f"{k} {v:.3f}" for k, v in final.items() if k.startswith("step")))
    assert ok


def test_criterion_08_postprocessing():
    truth = np.zeros((24, 24, 24), dtype=np.uint8)
    truth[4:12, 4:12, 4:12] = 1
    pred = truth.copy()
    pred[18:21, 18:21, 18:21] = 1
    before = dice_masks(pred == 1, truth == 1)
    after = dice_masks(largest_component(pred == 1), truth == 1)
    # 2 * 512 / (539 + 512) before, exactly 1 after
    ok = after > before and before == pytest.approx(1024 / 1051) and after == 1.0
    record(8, ok, f"Dice {before:.4f} -> {after:.4f} after largest component")
    assert ok


def _cli_metrics(preset: str, out: Path, extra: list[str]) -> bytes:
    cmd = [sys.executable, "-m", "boostseg.cli"]
    common = ["--preset", preset, "--output-dir", str(out), "--num-scans", "4", "--split-fractions", "0.5", "0.25",
              "0.25", "--batches-per-epoch", "2", "--seed", "3", *extra]
    subprocess.run(cmd + ["generate-data", *common], check=True, capture_output=True)
    subprocess.run(cmd + ["train", "--quiet", *common], check=True, capture_output=True)
    return (out / "train" / "metrics.csv").read_bytes()


def test_criterion_09_determinism(tmp_path):
    same = {}
    shrink = {"kidney2class": ["--dims", "32", "32", "32", "--epochs", "3"],
              "multiclass": ["--dims", "32", "32", "32", "--epochs", "22", "--period", "11", "--batch-size", "8"]}
    for preset, extra in shrink.items():
        # the same command twice; the output directory is part of the manifest, so it is reused
        a = _cli_metrics(preset, tmp_path / preset, extra)
        ckpt = (tmp_path / preset / "train" / "final.ckpt").read_bytes()
        b = _cli_metrics(preset, tmp_path / preset, extra)
        same[preset] = a == b and len(a) > 0 and ckpt == (tmp_path / preset / "train" / "final.ckpt").read_bytes()
    first = tmp_path / "kidney2class" / "train" / "final.ckpt"
    net, vel, extra = load_checkpoint(first)
    save_checkpoint(tmp_path / "again.ckpt", net, vel, extra)
    round_trip = (tmp_path / "again.ckpt").read_bytes() == first.read_bytes()
    ok = all(same.values()) and round_trip
    record(9, ok, f"identical metrics CSVs {same}; checkpoint save-load-save bit-exact {round_trip}")
    assert ok


def test_criterion_10_error_map_dynamics(isample):
    cfg = rp.isample_configs()[0]
    out = rp.error_map_study(isample["boosted_checkpoint"], cfg, 0, CACHE / "error_maps")
    ok = out["mean_error"] < 0.05 and out["shell_error"] >= 2 * out["interior_error"]
    record(10, ok, f"{out['scan']}: mean error {out['mean_error']:.4f}, boundary shell {out['shell_error']:.4f} "
                   f"vs interior {out['interior_error']:.4f} ({out['shell_ratio']:.2f}x); "
                   f"background halo outside the objects {out['outer_shell_error']:.4f}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
