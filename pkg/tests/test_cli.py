import json

import numpy as np
import pytest

from cmppp.cli import main
from cmppp.core import Grid, write_grid
from cmppp.network import Checkpoint, ConvNetArch, ConvNetParams, save_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small end-to-end workspace: dataset, trained checkpoint, zero checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    spec = {"h_px": 24, "w_px": 24, "mean_count": 2.0, "seed": 1}
    (root / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(root / "spec.json"), "--n", "8",
                 "--out", str(root / "data")]) == 0

    train_cfg = {"epochs": 2, "batch_size": 4, "learning_rate": 0.02, "hidden": 6}
    (root / "train.json").write_text(json.dumps(train_cfg))
    assert main(["train", "--config", str(root / "train.json"), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--threads", "1"]) == 0

    arch = ConvNetArch(num_classes=3, hidden=6)
    zero = Checkpoint(params=ConvNetParams(arch, np.zeros(arch.param_count())), sigma=0.1)
    save_checkpoint(zero, root / "zero.ckpt")
    write_grid(Grid.from_values(np.zeros((24, 24, 3))), root / "blank.grid")
    return root


class TestSynth:
    def test_outputs_exist(self, workspace):
        assert (workspace / "data" / "manifest.json").exists()
        files = list((workspace / "data").iterdir())
        assert len(files) == 8 * 4 + 1

    def test_rerun_identical_bytes(self, workspace, tmp_path):
        assert main(["synth", "--spec", str(workspace / "spec.json"), "--n", "3",
                     "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--spec", str(workspace / "spec.json"), "--n", "3",
                     "--out", str(tmp_path / "b")]) == 0
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestTrain:
    def test_outputs_exist(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.ckpt").exists()
        assert (run / "training_log.csv").exists()
        assert (run / "training_loss.png").exists()
        summary = json.loads((run / "train_summary.json").read_text())
        assert summary["config"]["epochs"] == 2
        assert summary["sigma"] > 0


class TestInfer:
    def test_detections_jsonl(self, workspace, tmp_path):
        out = tmp_path / "dets"
        assert main(["infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"),
                     "--data", str(workspace / "data"), "--crop", "8",
                     "--out", str(out)]) == 0
        lines = (out / "detections.jsonl").read_text().strip().splitlines()
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"image_id", "x", "y", "w", "h", "class_id", "score"}
            assert rec["w"] >= 0.0 and rec["h"] >= 0.0

    def test_ensemble_writes_std_grids(self, workspace, tmp_path):
        out = tmp_path / "ens"
        assert main(["infer", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"),
                     "--data", str(workspace / "data"), "--crop", "8",
                     "--ensemble", str(workspace / "zero.ckpt"),
                     "--out", str(out)]) == 0
        stds = list(out.glob("*.intensity_std.grid"))
        assert len(stds) == 8


class TestVoid:
    def test_center_mode_prints_exp_minus_one(self, workspace, capsys):
        # zero checkpoint: unit intensity, full-domain region, P(void) = 1/e
        code = main(["void", "--ckpt", str(workspace / "zero.ckpt"),
                     "--image", str(workspace / "blank.grid"),
                     "--region", "0.5,0.5,1.0,1.0", "--mode", "center"])
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "0.367879"
        doc = json.loads(out[1])
        assert doc["mode"] == "center"
        assert doc["probability"] == pytest.approx(np.exp(-1.0), abs=1e-9)

    def test_box_mode_and_json_output(self, workspace, tmp_path, capsys):
        out_json = tmp_path / "void.json"
        code = main(["void", "--ckpt", str(workspace / "zero.ckpt"),
                     "--image", str(workspace / "blank.grid"),
                     "--region", "0.5,0.5,0.2,0.2", "--mode", "box",
                     "--out", str(out_json)])
        assert code == 0
        doc = json.loads(out_json.read_text())
        assert 0.0 < doc["probability"] < 1.0
        assert doc["config"]["sigma"] == 0.1

    def test_mask_mode(self, workspace, tmp_path, capsys):
        mask = np.zeros((24, 24))
        mask[6:12, 6:12] = 1.0
        write_grid(Grid.from_values(mask), tmp_path / "mask.grid")
        code = main(["void", "--ckpt", str(workspace / "zero.ckpt"),
                     "--image", str(workspace / "blank.grid"),
                     "--mode", "mask", "--mask", str(tmp_path / "mask.grid")])
        assert code == 0
        prob = float(capsys.readouterr().out.splitlines()[0])
        assert 0.0 < prob < 1.0

    def test_missing_region_is_validation_error(self, workspace):
        assert main(["void", "--ckpt", str(workspace / "zero.ckpt"),
                     "--image", str(workspace / "blank.grid"), "--mode", "center"]) == 2


class TestCalibrate:
    def test_true_source_report(self, workspace, tmp_path, capsys):
        out = tmp_path / "cal"
        code = main(["calibrate", "--source", "true", "--data", str(workspace / "data"),
                     "--area", "0.02", "--mode", "center", "--boxes", "10",
                     "--out", str(out), "--seed", "3", "--heatmaps", "2"])
        assert code == 0
        doc = json.loads((out / "reliability.json").read_text())
        assert doc["n_records"] == 8 * 10
        assert sum(doc["bin_count"]) == 80
        assert (out / "reliability.csv").exists()
        assert (out / "reliability.png").exists()
        assert len(list(out.glob("*.pgm"))) == 2

    def test_checkpoint_source_with_recalibration(self, workspace, tmp_path):
        out = tmp_path / "cal2"
        code = main(["calibrate", "--source", str(workspace / "run" / "checkpoint.ckpt"),
                     "--data", str(workspace / "data"), "--area", "0.02", "--mode", "box",
                     "--boxes", "30", "--recalibrate", "platt", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "reliability.json").read_text())
        assert doc["recalibration"]["method"] == "platt"
        assert (out / "reliability_recalibrated.png").exists()

    def test_identical_seeds_identical_outputs(self, workspace, tmp_path):
        args = ["calibrate", "--source", "true", "--data", str(workspace / "data"),
                "--area", "0.01", "--boxes", "5", "--seed", "11"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ("reliability.json", "reliability.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestEval:
    def test_summary_and_ablation(self, workspace, tmp_path):
        out = tmp_path / "ev"
        code = main(["eval", "--ckpt", str(workspace / "run" / "checkpoint.ckpt"),
                     "--data", str(workspace / "data"), "--crop", "8",
                     "--ablate", "4,8,16", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "eval_summary.json").read_text())
        assert "mean_ap" in doc["summary"]
        assert len(doc["ablation"]) == 3
        assert (out / "ap_table.csv").exists()
        assert (out / "ablation.csv").exists()
        assert (out / "ablation.png").exists()


class TestThreadsEnv:
    def test_env_thread_count_does_not_change_results(self, workspace, tmp_path, monkeypatch):
        args = ["calibrate", "--source", "true", "--data", str(workspace / "data"),
                "--area", "0.02", "--boxes", "5", "--seed", "4"]
        monkeypatch.delenv("CMPPP_THREADS", raising=False)
        assert main(args + ["--out", str(tmp_path / "one"), "--threads", "1"]) == 0
        monkeypatch.setenv("CMPPP_THREADS", "3")
        assert main(args + ["--out", str(tmp_path / "env")]) == 0
        assert (tmp_path / "one" / "reliability.json").read_bytes() == (
            tmp_path / "env" / "reliability.json"
        ).read_bytes()

    def test_invalid_env_value_is_validation_error(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("CMPPP_THREADS", "lots")
        assert main(["calibrate", "--source", "true", "--data", str(workspace / "data"),
                     "--area", "0.02", "--out", str(tmp_path / "x")]) == 2


class TestErrors:
    def test_numeric_failure_is_exit_3(self, workspace, tmp_path):
        # a finite but astronomically scaled input overflows exp(L) during training
        import shutil

        bad = tmp_path / "bad_data"
        shutil.copytree(workspace / "data", bad)
        first = json.loads((bad / "manifest.json").read_text())["images"][0]
        huge = Grid.from_values(np.full((24, 24, 3), 1e30))
        write_grid(huge, bad / first["input"])
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps({"epochs": 1, "batch_size": 2, "hidden": 4}))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code = main(["train", "--config", str(cfg), "--data", str(bad),
                         "--out", str(tmp_path / "run"), "--threads", "1"])
        assert code == 3

    def test_unreadable_checkpoint_is_exit_2(self, workspace):
        assert main(["void", "--ckpt", "/nonexistent.ckpt",
                     "--image", str(workspace / "blank.grid"),
                     "--region", "0.5,0.5,0.2,0.2"]) == 2

    def test_malformed_region_is_exit_2(self, workspace):
        assert main(["void", "--ckpt", str(workspace / "zero.ckpt"),
                     "--image", str(workspace / "blank.grid"),
                     "--region", "0.5,0.5"]) == 2

    def test_bad_area_is_exit_2(self, workspace, tmp_path):
        assert main(["calibrate", "--source", "true", "--data", str(workspace / "data"),
                     "--area", "7.0", "--out", str(tmp_path / "x")]) == 2

    def test_unknown_subcommand_raises_system_exit(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
