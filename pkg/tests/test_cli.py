"""End-to-end tests for the command-line harness.

Everything runs in-process through main(argv), on deliberately small
trajectories so the whole file stays fast. The determinism tests compare
file bytes across reruns: reports embed no timestamps, so identical
config and seed must mean identical artifacts.
"""

import hashlib
import json

import numpy as np
import pytest
import yaml

from tracksim.cli import main
from tracksim.gp import FitConfig, fit, held_out_error, load_model, save_model
from tracksim.sim import load_dataset, load_log

FAST_GP = {"restarts": 1, "max_iter": 80, "max_train": 200}


def write_config(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def tiny_config(tmp_path, name="cfg.yaml", **overrides):
    doc = {
        "trajectory": {"kind": "figure8", "amplitude": 0.5, "period_steps": 120},
        "gp": dict(FAST_GP),
        "evaluation": {"seeds": [50]},
    }
    doc.update(overrides)
    return write_config(tmp_path, doc, name)


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGainsCheck:
    def test_stable_gains_exit_zero(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert main(["gains-check", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "stable" in out
        assert "0.917891" in out

    def test_unstable_gains_exit_one(self, tmp_path):
        cfg = tiny_config(tmp_path, gains={"kp": [2.5, 2.5], "kd": [0.3, 0.3]})
        assert main(["gains-check", "--config", cfg]) == 1

    def test_malformed_gains_exit_two(self, tmp_path):
        cfg = tiny_config(tmp_path, gains={"kp": [0.1, 0.1], "kd": None})
        assert main(["gains-check", "--config", cfg]) == 2

    def test_first_order_poles(self, tmp_path, capsys):
        cfg = tiny_config(
            tmp_path, controller={"order": 1}, gains={"kp": [0.2, 0.4], "kd": None}
        )
        assert main(["gains-check", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "0.800000" in out and "0.600000" in out


class TestConfigErrors:
    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_invalid_config(self, tmp_path):
        cfg = write_config(tmp_path, {"plant": "warp"})
        assert main(["simulate", "--config", cfg]) == 2

    def test_unknown_subcommand_rejected_by_argparse(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["teleport", "--config", "x"])


class TestSimulate:
    def test_nominal_run_writes_artifacts(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        log = load_log(str(out / "log.csv"))
        assert len(log) == 121
        metrics = json.loads((out / "metrics.json").read_text())
        # exact inverse on the nominal plant tracks to machine precision
        assert metrics["mean_error"] < 1e-12
        assert metrics["steps"] == 121
        assert metrics["config"]["trajectory"]["amplitude"] == 0.5
        assert len(metrics["config_hash"]) == 64
        assert "simulate" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_config(tmp_path, plant="slip",
                          world={"base_slip": 0.1, "noise_sigma": 1e-3})
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        first = {p.name: sha256(p) for p in out.iterdir()}
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        second = {p.name: sha256(p) for p in out.iterdir()}
        assert first == second

    def test_seed_flag_changes_noisy_rollout(self, tmp_path):
        cfg = tiny_config(tmp_path, plant="slip",
                          world={"base_slip": 0.1, "noise_sigma": 1e-3})
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(out_b),
                     "--seed", "77"]) == 0
        ma = json.loads((out_a / "metrics.json").read_text())
        mb = json.loads((out_b / "metrics.json").read_text())
        assert ma["seed"] == 0 and mb["seed"] == 77
        assert ma["mean_error"] != mb["mean_error"]

    def test_gp_slot_requires_model(self, tmp_path):
        cfg = tiny_config(tmp_path, controller={"slot": "gp"})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 2

    def test_gp_slot_runs_with_model(self, tmp_path):
        cfg = tiny_config(tmp_path)
        data_dir, model_dir, run_dir = (
            tmp_path / "d", tmp_path / "m", tmp_path / "r"
        )
        assert main(["collect", "--config", cfg, "--out", str(data_dir)]) == 0
        assert main(["train", str(data_dir / "dataset.csv"), "--config", cfg,
                     "--out", str(model_dir)]) == 0
        cfg_gp = tiny_config(tmp_path, controller={"slot": "gp"}, name="gp.yaml")
        assert main(["simulate", "--config", cfg_gp, "--out", str(run_dir),
                     "--model", str(model_dir / "model.json")]) == 0
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert len(metrics["model_sha256"]) == 64


class TestCollect:
    def test_artifacts_and_partition(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out = tmp_path / "data"
        assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
        log = load_log(str(out / "log.csv"))
        full = load_dataset(str(out / "dataset.csv"))
        train = load_dataset(str(out / "train.csv"))
        test = load_dataset(str(out / "test.csv"))
        assert len(full) == len(log) - 2
        assert len(train) + len(test) == len(full)
        report = json.loads((out / "collect.json").read_text())
        assert report["samples"] == len(full)
        assert report["train_samples"] == len(train)

    def test_split_respects_train_fraction(self, tmp_path):
        cfg = tiny_config(tmp_path, gp={**FAST_GP, "train_fraction": 0.5})
        out = tmp_path / "data"
        assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
        train = load_dataset(str(out / "train.csv"))
        full = load_dataset(str(out / "dataset.csv"))
        assert len(train) == int(round(len(full) * 0.5))


class TestTrain:
    def fixture_dataset(self, tmp_path, cfg):
        out = tmp_path / "data"
        assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
        return out / "dataset.csv"

    def test_writes_model_and_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ds = self.fixture_dataset(tmp_path, cfg)
        out = tmp_path / "model"
        assert main(["train", str(ds), "--config", cfg, "--out", str(out)]) == 0
        report = json.loads((out / "train_report.json").read_text())
        assert report["samples"] == 119
        assert report["datasets"][0]["file"] == "dataset.csv"
        assert len(report["outputs"]) == 2
        assert report["model_sha256"] == sha256(out / "model.json")

    def test_deterministic_across_reruns(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ds = self.fixture_dataset(tmp_path, cfg)
        out = tmp_path / "model"
        assert main(["train", str(ds), "--config", cfg, "--out", str(out)]) == 0
        first = sha256(out / "model.json")
        assert main(["train", str(ds), "--config", cfg, "--out", str(out)]) == 0
        assert sha256(out / "model.json") == first

    def test_pooling_concatenates(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ds = self.fixture_dataset(tmp_path, cfg)
        out = tmp_path / "model"
        assert main(["train", str(ds), str(ds), "--config", cfg,
                     "--out", str(out)]) == 0
        report = json.loads((out / "train_report.json").read_text())
        assert report["samples"] == 2 * 119
        assert len(report["datasets"]) == 2

    def test_model_flag_sets_output_path(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ds = self.fixture_dataset(tmp_path, cfg)
        target = tmp_path / "elsewhere" / "m.json"
        target.parent.mkdir()
        assert main(["train", str(ds), "--config", cfg, "--out",
                     str(tmp_path / "model"), "--model", str(target)]) == 0
        assert target.exists()

    def test_clean_dataset_trains_an_accurate_model(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out = tmp_path / "data"
        assert main(["collect", "--config", cfg, "--out", str(out)]) == 0
        model_dir = tmp_path / "model"
        assert main(["train", str(out / "train.csv"), "--config", cfg,
                     "--out", str(model_dir)]) == 0
        model = load_model(str(model_dir / "model.json"))
        test = load_dataset(str(out / "test.csv"))
        _, held = held_out_error(model, test.inputs, test.targets)
        command_scale = float(np.mean(np.linalg.norm(test.targets, axis=1)))
        assert held < 1e-3 * command_scale

    def test_single_sample_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        ds = self.fixture_dataset(tmp_path, cfg)
        tiny = tmp_path / "tiny.csv"
        lines = ds.read_text().splitlines()
        tiny.write_text("\n".join(lines[:2]) + "\n")
        assert main(["train", str(tiny), "--config", cfg,
                     "--out", str(tmp_path / "m")]) == 2

    def test_missing_dataset(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert main(["train", str(tmp_path / "none.csv"), "--config", cfg,
                     "--out", str(tmp_path / "m")]) == 4

    def test_corrupt_dataset(self, tmp_path):
        cfg = tiny_config(tmp_path)
        bad = tmp_path / "bad.csv"
        bad.write_text("w1,w2\n1,2\n")
        assert main(["train", str(bad), "--config", cfg,
                     "--out", str(tmp_path / "m")]) == 4


class TestEvaluate:
    def trained_model(self, tmp_path, cfg):
        data_dir, model_dir = tmp_path / "d", tmp_path / "m"
        assert main(["collect", "--config", cfg, "--out", str(data_dir)]) == 0
        assert main(["train", str(data_dir / "dataset.csv"), "--config", cfg,
                     "--out", str(model_dir)]) == 0
        return model_dir / "model.json"

    def test_report_structure(self, tmp_path):
        cfg = tiny_config(tmp_path)
        model = self.trained_model(tmp_path, cfg)
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", cfg, "--out", str(out),
                     "--model", str(model)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["trajectory_kind"] == "figure8"
        assert report["seeds"] == [50]
        row = report["per_seed"][0]
        assert row["nominal"]["mean_error"] < 1e-12
        assert row["gp_prediction_rmse"] > 0.0
        assert set(report["aggregate"]) == {
            "nominal_mean_error", "nominal_max_error",
            "gp_mean_error", "gp_max_error", "gp_prediction_rmse",
        }
        errors = (out / "errors_seed50.csv").read_text().splitlines()
        assert errors[0] == "t,ref_x,ref_y,err_nominal,err_gp"
        assert len(errors) == 122

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_config(tmp_path)
        model = self.trained_model(tmp_path, cfg)
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", cfg, "--out", str(out),
                     "--model", str(model)]) == 0
        first = {p.name: sha256(p) for p in out.iterdir()}
        assert main(["evaluate", "--config", cfg, "--out", str(out),
                     "--model", str(model)]) == 0
        assert {p.name: sha256(p) for p in out.iterdir()} == first

    def test_nominal_plant_slot_equivalence(self, tmp_path):
        # On the exact plant the closed form tracks to machine precision,
        # and the model must predict the commands that rollout actually
        # issued about as well as it predicted held-out training pairs.
        # Closed-loop error of the learned slot is reported, not bounded:
        # data gathered while tracking perfectly never exercises the
        # model's response to tracking errors, so its loop can drift.
        cfg = tiny_config(tmp_path)
        model_path = self.trained_model(tmp_path, cfg)
        model = load_model(str(model_path))
        test = load_dataset(str(tmp_path / "d" / "test.csv"))
        norms, _ = held_out_error(model, test.inputs, test.targets)
        held_rmse = float(np.sqrt(np.mean(norms**2)))
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", cfg, "--out", str(out),
                     "--model", str(model_path)]) == 0
        report = json.loads((out / "report.json").read_text())
        row = report["per_seed"][0]
        assert row["nominal"]["mean_error"] < 1e-6
        assert row["gp_prediction_rmse"] <= 10.0 * held_rmse
        assert np.isfinite(row["gp"]["mean_error"])

    def test_missing_model(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path),
                     "--model", str(tmp_path / "none.json")]) == 4

    def test_model_flag_required(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 2

    def test_corrupt_model(self, tmp_path):
        cfg = tiny_config(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text('{"broken": true}')
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path),
                     "--model", str(bad)]) == 4

    def test_wrong_shape_model(self, tmp_path):
        # a valid model file whose input layout cannot drive the controller
        rng = np.random.default_rng(0)
        model = fit(
            rng.normal(size=(12, 4)), rng.normal(size=(12, 2)),
            FitConfig(restarts=1, max_iter=20),
        )
        path = tmp_path / "narrow.json"
        save_model(model, str(path))
        cfg = tiny_config(tmp_path)
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path),
                     "--model", str(path)]) == 4
