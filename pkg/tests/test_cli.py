import csv
import json

import numpy as np
import pytest

from medconv.cli import EXIT_CONFIG, EXIT_DATA, main
from medconv.data import Manifest
from medconv.experiment import TABLE5_GRID, load_logits, parse_grid

TINY_MODEL = {
    "stage_blocks": [1, 1, 1, 1],
    "stem_channels": 4,
    "stage_channels": [2, 2, 4, 4],
    "bottleneck_expansion": 2,
    "num_classes": 3,
    "input_shape": [1, 12, 12, 12],
    "name": "tiny",
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = root / "phantoms.json"
    cfg.write_text(json.dumps({"dims": [14, 14, 14], "seed": 3}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "ph"), "--n", "60"]) == 0
    return root / "ph" / "manifest.csv"


@pytest.fixture(scope="module")
def train_config(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("cfg") / "train.json"
    path.write_text(json.dumps({"model": TINY_MODEL, "manifest": str(dataset), "epochs": 2,
                                "batch_size": 8, "lr": 0.02}))
    return path


def _train(train_config, out, *extra):
    return main(["train", "--config", str(train_config), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, train_config):
    out = tmp_path_factory.mktemp("run")
    assert _train(train_config, out) == 0
    return out


class TestGenData:
    def test_counts_printed(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "a"), "--n", "200"]) == 0
        out = capsys.readouterr().out
        assert "class 0 normal: 120" in out
        assert "class 1 osteopenia: 50" in out
        assert "class 2 osteoporosis: 30" in out
        manifest = Manifest.from_csv(tmp_path / "a" / "manifest.csv")
        assert len(manifest.records) == 200

    def test_rerun_same_checksum(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--out", str(tmp_path / name), "--n", "20", "--seed", "5"]) == 0
        a = Manifest.from_csv(tmp_path / "a" / "manifest.csv")
        b = Manifest.from_csv(tmp_path / "b" / "manifest.csv")
        assert a.checksum() == b.checksum()

    def test_missing_config_exits_2(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        code = main(["gen-data", "--config", str(missing), "--out", str(tmp_path / "x")])
        assert code == EXIT_CONFIG
        assert str(missing) in capsys.readouterr().err

    def test_invalid_proportions_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"proportions": [0.5, 0.5, 0.5]}))
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


class TestTrain:
    def test_artifacts_written(self, run_dir):
        for name in ("effective_config.json", "train_log.csv", "model.mckp", "logits_test.npz",
                     "metrics_test.csv", "metrics_test.md"):
            assert (run_dir / name).exists(), name
        rows = list(csv.DictReader((run_dir / "train_log.csv").open()))
        assert [r["epoch"] for r in rows if r["split"] == "train"] == ["1", "2"]
        effective = json.loads((run_dir / "effective_config.json").read_text())
        assert len(effective["config_hash"]) == 16

    def test_deterministic(self, run_dir, train_config, tmp_path):
        assert _train(train_config, tmp_path) == 0
        assert (tmp_path / "metrics_test.csv").read_bytes() == (run_dir / "metrics_test.csv").read_bytes()
        a, b = load_logits(tmp_path / "logits_test.npz"), load_logits(run_dir / "logits_test.npz")
        np.testing.assert_array_equal(a["logits"], b["logits"])

    def test_seed_changes_result(self, run_dir, train_config, tmp_path):
        assert _train(train_config, tmp_path, "--seed", "7") == 0
        a, b = load_logits(tmp_path / "logits_test.npz"), load_logits(run_dir / "logits_test.npz")
        assert not np.array_equal(a["logits"], b["logits"])

    @pytest.mark.parametrize("optimizer", ["sam", "schedulefree"])
    def test_other_optimizers(self, train_config, tmp_path, optimizer):
        assert _train(train_config, tmp_path, "--optimizer", optimizer, "--epochs", "1") == 0
        assert np.isfinite(load_logits(tmp_path / "logits_test.npz")["logits"]).all()

    def test_balanced_pipeline_flags(self, train_config, tmp_path, capsys):
        code = _train(train_config, tmp_path, "--loss", "balce", "--oversample", "--balaug",
                      "--windows", "--tau2", "0.5", "--epochs", "1")
        assert code == 0
        assert "tiny+windows+balce+balaug+oversample+logitadj" in capsys.readouterr().out

    def test_balce_zero_count_class_exits_3(self, dataset, train_config, tmp_path, capsys):
        rows = list(csv.DictReader(dataset.open()))
        for r in rows:
            r["path"] = str((dataset.parent / r["path"]).resolve())
            if r["mask_path"]:
                r["mask_path"] = str((dataset.parent / r["mask_path"]).resolve())
            if r["label"] == "2":
                r["split"] = "test"
        edited = tmp_path / "manifest.csv"
        with edited.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        code = _train(train_config, tmp_path / "run", "--manifest", str(edited), "--loss", "balce")
        assert code == EXIT_DATA
        assert "balce" in capsys.readouterr().err

    def test_unknown_config_field_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_bad_schedule_exits_2(self, train_config, tmp_path):
        cfg = json.loads(train_config.read_text())
        cfg["lr_schedule"] = "step"
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_huge_lr_exits_4(self, train_config, tmp_path, capsys):
        code = _train(train_config, tmp_path, "--lr", "1e200", "--lr-schedule", "constant")
        assert code == 4
        assert "lr" in capsys.readouterr().err


class TestEval:
    def test_unit_taus_match_no_calibration(self, run_dir, dataset, tmp_path):
        ckpt = str(run_dir / "model.mckp")
        args = ["eval", "--checkpoint", ckpt, "--manifest", str(dataset)]
        assert main(args + ["--tau1", "1", "--tau2", "1", "--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--no-calibration", "--out", str(tmp_path / "b")]) == 0
        a = list(csv.DictReader((tmp_path / "a" / "metrics_test.csv").open()))[0]
        b = list(csv.DictReader((tmp_path / "b" / "metrics_test.csv").open()))[0]
        for key in ("accuracy", "f1", "roc_auc"):
            assert float(a[key]) == pytest.approx(float(b[key]), abs=1e-12)

    def test_logits_match_training_cache(self, run_dir, dataset, tmp_path):
        args = ["eval", "--checkpoint", str(run_dir / "model.mckp"), "--manifest", str(dataset),
                "--out", str(tmp_path)]
        assert main(args) == 0
        fresh = load_logits(tmp_path / "logits_test.npz")
        cached = load_logits(run_dir / "logits_test.npz")
        np.testing.assert_array_equal(fresh["logits"], cached["logits"])

    def test_cache_reused(self, run_dir, dataset, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(run_dir / "model.mckp"), "--manifest", str(dataset),
                "--out", str(tmp_path)]
        assert main(args) == 0
        assert "model pass" in capsys.readouterr().out
        assert main(args + ["--tau2", "0.7"]) == 0
        assert "cached logits" in capsys.readouterr().out

    def test_config_model_mismatch_exits_2(self, run_dir, dataset, tmp_path):
        cfg = tmp_path / "other.json"
        cfg.write_text(json.dumps({"model": dict(TINY_MODEL, stem_channels=6)}))
        args = ["eval", "--checkpoint", str(run_dir / "model.mckp"), "--manifest", str(dataset),
                "--config", str(cfg), "--out", str(tmp_path / "e")]
        assert main(args) == EXIT_CONFIG

    def test_missing_checkpoint_exits_3(self, dataset, tmp_path):
        args = ["eval", "--checkpoint", str(tmp_path / "none.mckp"), "--manifest", str(dataset),
                "--out", str(tmp_path)]
        assert main(args) == EXIT_DATA


class TestSweep:
    def test_fixed_tau1_table(self, run_dir, tmp_path):
        logits = str(run_dir / "logits_test.npz")
        assert main(["sweep", "--logits", logits, "--mode", "fixed_tau1", "--out", str(tmp_path / "a")]) == 0
        rows = list(csv.DictReader((tmp_path / "a" / "sweep_fixed_tau1.csv").open()))
        assert len(rows) == len(TABLE5_GRID) == 10
        assert [float(r["tau2"]) for r in rows] == TABLE5_GRID

    def test_tied_mode_explicit_grid(self, run_dir, tmp_path):
        logits = str(run_dir / "logits_test.npz")
        code = main(["sweep", "--logits", logits, "--mode", "tied", "--grid", "0.5:1.5:0.5", "--out", str(tmp_path)])
        assert code == 0
        assert len(list(csv.DictReader((tmp_path / "sweep_tied.csv").open()))) == 3

    def test_missing_logits_exits_3(self, tmp_path):
        assert main(["sweep", "--logits", str(tmp_path / "x.npz"), "--out", str(tmp_path)]) == EXIT_DATA

    @pytest.mark.parametrize(
        "spec, expected",
        [("1.0,0.5", [1.0, 0.5]), ("1:0.8:0.1", [1.0, 0.9, 0.8]), ("0.1:0.3:0.1", [0.1, 0.2, 0.3]), ("", [])],
    )
    def test_parse_grid(self, spec, expected):
        assert parse_grid(spec) == pytest.approx(expected)


class TestReport:
    def test_dedupe_and_delta(self, run_dir, train_config, tmp_path, capsys):
        other = tmp_path / "other"
        assert _train(train_config, other, "--tau2", "0.5") == 0
        capsys.readouterr()
        assert main(["report", str(run_dir), str(run_dir), str(other), "--out", str(tmp_path / "cmp")]) == 0
        captured = capsys.readouterr()
        assert "duplicate" in captured.err
        rows = list(csv.DictReader((tmp_path / "cmp" / "comparison.csv").open()))
        assert len(rows) == 2
        assert float(rows[0]["delta_accuracy"]) == 0.0
        expected = float(rows[1]["accuracy"]) - float(rows[0]["accuracy"])
        assert float(rows[1]["delta_accuracy"]) == pytest.approx(expected)
        assert "Δ Accuracy" in captured.out

    def test_missing_run_warns(self, run_dir, tmp_path, capsys):
        assert main(["report", str(run_dir), str(tmp_path / "ghost"), "--out", str(tmp_path / "cmp")]) == 0
        assert "skipped" in capsys.readouterr().err
