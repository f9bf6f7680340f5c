import csv
import json
import math

import numpy as np
import pytest

from consensus_mp import harness, models
from consensus_mp.engine import EngineConfig
from consensus_mp.expfam import Gaussian, MvGaussian, PointMass
from consensus_mp.forest import ForestConfig
from consensus_mp.harness import (CMP, FOREST_ONLY, MP, ConfigError, ExperimentConfig,
                                  compute_metrics, light_angle, main)

SMALL = {"model": {"model": "circle", "n_points": 6}, "trainSource": "samples", "D": 40,
         "trials": 2, "iterations": 3, "arms": ["MP", "CMP", "ForestOnly"], "seed": 7,
         "forest": {"treeCount": 2, "maxDepth": 4}}


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "circle.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def small_cfg(**kw):
    d = dict(SMALL, **kw)
    return ExperimentConfig.from_dict(d)


class TestMetrics:
    def test_exact_posterior_gives_zero(self):
        spec = models.CircleSpec()
        lat = {"c": np.array([0.5, -1.0]), "r": 1.2}
        b = {"c": PointMass(lat["c"]), "r": Gaussian.from_mean_var(1.2, 0.1)}
        m = compute_metrics(spec, b, lat)
        assert m["centerError"] == 0.0
        assert m["radiusError"] == pytest.approx(0.0, abs=1e-15)

    def test_center_error(self):
        b = {"c": MvGaussian.from_mean_cov([1.0, 1.0], np.eye(2)), "r": PointMass(1.0)}
        m = compute_metrics(models.CircleSpec(), b, {"c": np.zeros(2), "r": 1.0})
        assert m["centerError"] == pytest.approx(math.sqrt(2))

    def test_light_angle(self):
        assert light_angle([0, 0, 1], [0, 1, 0]) == pytest.approx(math.pi / 2)
        assert light_angle([0, 0, 2], [0, 0, 1]) == pytest.approx(0.0)

    def test_square_colour_error(self):
        spec = models.SquareSpec()
        b = {"c": PointMass(np.array([8.0, 8.0])), "l": PointMass(4.0),
             "fg": PointMass(0.9), "bg": PointMass(0.1)}
        lat = {"c": np.array([8.0, 8.0]), "l": 5.0, "fg": 0.6, "bg": 0.5}
        m = compute_metrics(spec, b, lat)
        assert m["sideLengthError"] == pytest.approx(1.0)
        assert m["colourError"] == pytest.approx(0.5)

    def test_missing_variable(self):
        with pytest.raises(harness.GraphError):
            compute_metrics(models.CircleSpec(), {}, {"c": np.zeros(2), "r": 1.0})


class TestConfig:
    def test_round_trip(self):
        cfg = small_cfg()
        back = ExperimentConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    @pytest.mark.parametrize("kw", [{"arms": []}, {"arms": ["Oracle"]}, {"D": 5},
                                    {"trainSource": "web"}, {"trials": 0}, {"colour": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_cfg(**kw)

    def test_mp_only_needs_no_training_data(self):
        assert not small_cfg(arms=["MP"], D=0).needs_training

    def test_derived_seeds_independent(self):
        seeds = {harness.derive_seed(0, s, k) for s in (1, 2) for k in range(50)}
        assert len(seeds) == 100


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = harness.run_experiment(small_cfg(), str(out))
    return res, out


class TestExperiment:
    def test_row_count(self, result):
        res, out = result
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["arm", "problem_id", "iteration", "metric", "value"]
        assert len(rows) - 1 == 3 * 2 * 3 * 2

    def test_summary(self, result):
        res, out = result
        summary = json.loads((out / "summary.json").read_text())
        assert summary["scheduleInvariants"] is True
        assert set(summary["arms"]) == {MP, CMP, FOREST_ONLY}
        assert len(summary["arms"][MP]["centerError"]["mean"]) == 3
        assert len(summary["datasetHash"]) == 64
        assert (out / "forests" / "delta_c.json").exists()

    def test_forest_only_is_flat(self, result):
        res, _ = result
        vals = {}
        for arm, k, it, m, v in res["rows"]:
            if arm == FOREST_ONLY and m == "radiusError":
                vals.setdefault(k, set()).add(v)
        assert all(len(v) == 1 for v in vals.values())

    def test_all_arms_share_problems(self, result):
        res, _ = result
        again = harness.run_experiment(small_cfg(arms=["MP"]))
        assert again["datasetHash"] == res["datasetHash"]
        mp_a = [r for r in res["rows"] if r[0] == MP]
        assert mp_a == again["rows"]

    def test_single_iteration_trial(self):
        res = harness.run_experiment(small_cfg(trials=1, iterations=1, arms=["MP"]))
        assert len(res["rows"]) == 2

    def test_failure_records_sentinel(self, monkeypatch):
        def boom(*a, **kw):
            raise FloatingPointError("diverged")
        monkeypatch.setattr(harness, "run_arm", boom)
        res = harness.run_experiment(small_cfg(trials=1, arms=["MP"]))
        assert {r[4] for r in res["rows"]} == {-1.0}
        assert res["events"]["failed"] == 1
        assert res["summary"] == {}


class TestDatasets:
    def test_jsonl_round_trip(self, tmp_path):
        spec = models.SquareSpec(width=4, height=4)
        path = tmp_path / "d.jsonl"
        harness.write_dataset(spec, [3, 4], path)
        (seed, lat, obs), _ = harness.read_dataset(path)
        ref_lat, ref_obs = models.sample(spec, 3)
        assert seed == 3 and obs == ref_obs
        np.testing.assert_array_equal(lat["c"], ref_lat["c"])

    def test_pgm_header(self, tmp_path):
        harness.write_pgm(np.arange(6.0).reshape(2, 3), tmp_path / "x.pgm")
        data = (tmp_path / "x.pgm").read_bytes()
        assert data.startswith(b"P5\n3 2\n255\n")
        assert data[-6:] == bytes([0, 51, 102, 153, 204, 255])


class TestCli:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, config_path):
        with pytest.raises(SystemExit) as e:
            main(["sample", "--config", config_path, "--bogus"])
        assert e.value.code == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["sample", "--config", str(tmp_path / "none.json")]) == 1

    def test_bad_config(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(dict(SMALL, trials=0)))
        assert main(["experiment", "--config", str(p), "--out", str(tmp_path)]) == 1
        p.write_text("{not json")
        assert main(["experiment", "--config", str(p), "--out", str(tmp_path)]) == 1

    def test_runtime_failure(self, config_path, tmp_path, monkeypatch):
        def boom(*a, **kw):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(harness, "run_experiment", boom)
        assert main(["experiment", "--config", config_path, "--out", str(tmp_path)]) == 2

    def test_sample(self, config_path, tmp_path):
        assert main(["sample", "--config", config_path, "--out", str(tmp_path), "--count", "3"]) == 0
        assert len(harness.read_dataset(tmp_path / "dataset.jsonl")) == 3

    def test_train_twice_byte_identical(self, config_path, tmp_path):
        for d in ("a", "b"):
            assert main(["train", "--config", config_path, "--seed", "3",
                         "--out", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "delta_c.json").read_bytes()
        assert a == (tmp_path / "b" / "delta_c.json").read_bytes()

    def test_infer_with_forests(self, config_path, tmp_path, capsys):
        assert main(["train", "--config", config_path, "--out", str(tmp_path / "f")]) == 0
        capsys.readouterr()
        assert main(["infer", "--config", config_path, "--forests", str(tmp_path / "f"),
                     "--out", str(tmp_path / "i")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["arm"] == CMP
        with open(tmp_path / "i" / "trace.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 3 * 2

    def test_experiment_arm_flag(self, config_path, tmp_path, capsys):
        assert main(["experiment", "--config", config_path, "--arm", "MP",
                     "--out", str(tmp_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out["final"]) == {MP}

    def test_model_only_config(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"model": "chain"}))
        cfg = harness.load_config(p)
        assert isinstance(cfg.model, models.ChainSpec)
