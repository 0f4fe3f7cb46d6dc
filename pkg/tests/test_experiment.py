import json

import numpy as np
import pytest

from boostseg import experiment as ex
from boostseg.autolr import ConstantSchedule, PopulationConfig

SMALL = {"phantom": {"dims": [16, 16, 16], "foreground_fraction_target": 0.03}, "num_scans": 4,
         "split": [0.5, 0.25, 0.25],
         "network": {"native": {"layers": [{"kind": "conv", "features": 3}]}, "low": None, "hidden": [4]},
         "epochs": {"batches_per_epoch": 2, "batch_size": 4}, "total_epochs": 2}


class TestConfig:
    def test_round_trip(self):
        cfg = ex.ExperimentConfig.resolve(preset="multiclass")
        again = ex.ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again.to_dict() == cfg.to_dict()

    def test_schedule_replaced_not_merged(self):
        cfg = ex.ExperimentConfig.resolve({"schedule": {"kind": "step", "rate": 0.01, "step": 5}})
        assert "period" not in cfg.schedule and cfg.schedule["step"] == 5
        assert cfg.make_schedule().lr(5) == pytest.approx(0.005 / 10)

    def test_make_schedule_kinds(self):
        assert isinstance(ex.ExperimentConfig.resolve().make_schedule(), ConstantSchedule)
        pop = ex.ExperimentConfig.resolve(preset="multiclass").make_schedule()
        assert isinstance(pop, PopulationConfig) and len(pop.runs) == 3

    @pytest.mark.parametrize("bad", [{"split": [0.5, 0.5, 0.5]}, {"split": [1.2, -0.1, -0.1]},
                                     {"network": {"num_classes": 3}}, {"total_epochs": 0},
                                     {"sampler": {"mode": "greedy"}}, {"sampler": {"error_floor": 0}},
                                     {"schedule": {"kind": "autolr", "period": 50}, "total_epochs": 120},
                                     {"schedule": {"kind": "constant", "rate": -1}}, {"bogus": 1},
                                     {"epochs": {"batch_size": 0}}])
    def test_invalid(self, bad):
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.resolve(bad)

    def test_unknown_preset(self):
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.resolve(preset="liver")

    def test_num_classes_follows_phantom(self):
        cfg = ex.ExperimentConfig.from_dict({"phantom": {"num_classes": 4, "intensity_means": [0, 150, 260, 370],
                                                         "distractor_class": 1},
                                             "network": dict(ex.DEFAULTS["network"], num_classes=4)})
        assert cfg.network.num_classes == 4


class TestSplits:
    @pytest.mark.parametrize("n,fr", [(1, (0.7, 0.1, 0.2)), (2, (0.7, 0.1, 0.2)), (0, (1.0, 0.0, 0.0))])
    def test_infeasible(self, n, fr):
        with pytest.raises(ex.ConfigError):
            ex.split_counts(n, fr)

    @pytest.mark.parametrize("n", range(6, 40))
    def test_sums_to_n(self, n):
        assert sum(ex.split_counts(n, (0.7, 0.1, 0.2))) == n


class TestData:
    def test_in_memory_matches_disk(self, tmp_path):
        cfg = ex.ExperimentConfig.resolve(SMALL)
        mem = ex.build_dataset(cfg)
        disk = ex.load_dataset(ex.generate_data(cfg, tmp_path), cfg)
        assert mem.names == disk.names
        for split in ex.SPLITS:
            for a, b in zip(mem.volumes[split], disk.volumes[split]):
                assert np.array_equal(a.data, b.data)
            for a, b in zip(mem.labels[split], disk.labels[split]):
                assert np.array_equal(a.data, b.data)

    def test_scans_differ(self):
        data = ex.build_dataset(ex.ExperimentConfig.resolve(SMALL))
        a, b = data.labels["train"]
        assert not np.array_equal(a.data, b.data)

    def test_sidecar(self, tmp_path):
        out = ex.generate_data(ex.ExperimentConfig.resolve(SMALL), tmp_path)
        meta = json.loads((out / "scan_002.json").read_text())
        assert meta["split"] == "val" and meta["foreground_voxels"] > 0
        assert meta["phantom"]["seed"] == ex.scan_seed(0, 2)


class TestManifest:
    def test_hash_and_refusal(self, tmp_path):
        a = ex.RunManifest({"x": 1}, "0.1.0", {})
        b = ex.RunManifest({"x": 2}, "0.1.0", {})
        assert a.hash != b.hash
        a.write(tmp_path)
        a.write(tmp_path)  # same manifest may be rewritten
        with pytest.raises(ex.ConfigError):
            b.write(tmp_path)

    def test_in_memory_train(self):
        res = ex.train(ex.ExperimentConfig.resolve(SMALL))
        assert len(res.records) == 2 and res.iterations == [2, 4]
        assert all(0.0 <= d <= 1.0 for d in res.mean_dice)


class TestWorkers:
    def test_env(self, monkeypatch):
        monkeypatch.delenv(ex.ENV_WORKERS, raising=False)
        assert ex.workers_from_env() == 1
        monkeypatch.setenv(ex.ENV_WORKERS, "3")
        assert ex.workers_from_env() == 3
        for bad in ("0", "many"):
            monkeypatch.setenv(ex.ENV_WORKERS, bad)
            with pytest.raises(ex.ConfigError):
                ex.workers_from_env()
