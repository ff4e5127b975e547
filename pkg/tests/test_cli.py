import json
import os

import numpy as np
import pytest

import blurvatar.diffopt as diffopt
from blurvatar.cli import main
from blurvatar.config import config_to_dict, default_config


def small_cfg_dict():
    cfg = default_config()
    cfg.motion.n_frames = 2
    cfg.datagen.t_gt = 3
    cfg.train.density = 60.0
    cfg.train.iterations = 4
    cfg.train.subframes = 2
    cfg.rig.width = cfg.rig.height = 32
    cfg.rig.fx = cfg.rig.fy = 30.0
    cfg.rig.cx = cfg.rig.cy = 16.0
    cfg.rig.n_train = 2
    cfg.rig.n_eval = 2
    return config_to_dict(cfg)


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clids")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(small_cfg_dict()))
    out = root / "dataset"
    rc = main(["generate", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    return str(cfg_path), str(out)


class TestGenerate:
    def test_success_writes_manifest(self, cli_dataset):
        _, out = cli_dataset
        assert os.path.exists(os.path.join(out, "manifest.json"))

    def test_malformed_json_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad2.json"
        bad.write_text(json.dumps({"definitely_not_a_key": 1}))
        assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_unwritable_out_exits_3(self, tmp_path, cli_dataset):
        cfg_path, _ = cli_dataset
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory")
        rc = main(["generate", "--config", cfg_path, "--out", str(blocker / "sub")])
        assert rc == 3

    def test_bal_seed_env_overrides(self, tmp_path, monkeypatch, cli_dataset):
        cfg_path, _ = cli_dataset
        monkeypatch.setenv("BAL_SEED", "777")
        out = tmp_path / "seeded"
        assert main(["generate", "--config", cfg_path, "--out", str(out)]) == 0
        manifest = json.load(open(out / "manifest.json"))
        assert manifest["seed"] == 777


class TestTrain:
    def test_train_writes_checkpoint_and_log(self, cli_dataset, tmp_path):
        cfg_path, dataset = cli_dataset
        out = tmp_path / "run"
        rc = main(["train", "--config", cfg_path, "--dataset", dataset, "--out", str(out)])
        assert rc == 0
        assert os.path.exists(out / "checkpoint_final.json")
        log_lines = open(out / "train_log.jsonl").read().strip().splitlines()
        entry = json.loads(log_lines[0])
        assert {"iteration", "loss", "l1", "reg", "wall_time_s"} <= set(entry)

    def test_ablation_flag_wires_through(self, cli_dataset, tmp_path):
        cfg_path, dataset = cli_dataset
        out = tmp_path / "run_ni"
        rc = main(["train", "--config", cfg_path, "--dataset", dataset,
                   "--out", str(out), "--ablation", "no-interp"])
        assert rc == 0
        ckpt = json.load(open(out / "checkpoint_final.json"))
        assert ckpt["config"]["train"]["ablation"] == "no-interp"
        assert ckpt["params"]["motion.knots"]["shape"][2] == 2  # subframes, not knots

    def test_missing_dataset_exits_3(self, cli_dataset, tmp_path):
        cfg_path, _ = cli_dataset
        rc = main(["train", "--config", cfg_path, "--dataset", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_resume_continues_to_final(self, cli_dataset, tmp_path):
        cfg = json.loads(open(cli_dataset[0]).read())
        cfg["train"]["checkpoint_every"] = 2
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        dataset = cli_dataset[1]
        out_a = tmp_path / "straight"
        assert main(["train", "--config", str(cfg_path), "--dataset", dataset, "--out", str(out_a)]) == 0
        out_b = tmp_path / "resumed"
        rc = main(["train", "--config", str(cfg_path), "--dataset", dataset, "--out", str(out_b),
                   "--resume", str(out_a / "checkpoint_000002.json")])
        assert rc == 0
        a = open(out_a / "checkpoint_final.json").read()
        b = open(out_b / "checkpoint_final.json").read()
        assert a == b


class TestRender:
    def test_counts_and_float_dump(self, cli_dataset, tmp_path):
        _, dataset = cli_dataset
        ckpt = os.path.join(dataset, "gt_checkpoint.json")
        out = tmp_path / "renders"
        rc = main(["render", "--checkpoint", ckpt, "--dataset", dataset,
                   "--camera", "c00", "--timesteps", "grid:3", "--frames", "all",
                   "--out", str(out), "--float-dump"])
        assert rc == 0
        pngs = [f for f in os.listdir(out) if f.endswith(".png")]
        f32s = [f for f in os.listdir(out) if f.endswith(".f32")]
        assert len(pngs) == 2 * 3  # 2 frames x 3 timesteps
        assert len(f32s) == len(pngs)

    def test_unknown_camera_exits_2(self, cli_dataset, tmp_path):
        _, dataset = cli_dataset
        ckpt = os.path.join(dataset, "gt_checkpoint.json")
        rc = main(["render", "--checkpoint", ckpt, "--dataset", dataset,
                   "--camera", "zz", "--out", str(tmp_path / "r")])
        assert rc == 2


class TestEvaluate:
    def test_ground_truth_reports_inf(self, cli_dataset, tmp_path, capsys):
        _, dataset = cli_dataset
        ckpt = os.path.join(dataset, "gt_checkpoint.json")
        out = tmp_path / "report.json"
        rc = main(["evaluate", "--checkpoint", ckpt, "--dataset", dataset,
                   "--out", str(out), "--csv"])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "inf" in stdout
        report = json.load(open(out))
        assert report["middle"]["psnr"] == "inf"
        assert os.path.exists(tmp_path / "report.csv")

    def test_missing_dataset_exits_3(self, cli_dataset, tmp_path):
        _, dataset = cli_dataset
        ckpt = os.path.join(dataset, "gt_checkpoint.json")
        rc = main(["evaluate", "--checkpoint", ckpt, "--dataset", str(tmp_path / "gone"),
                   "--out", str(tmp_path / "r.json")])
        assert rc == 3


class TestGradcheck:
    def test_pass_exit_0_and_report(self, tmp_path):
        out = tmp_path / "gc.json"
        rc = main(["gradcheck", "--out", str(out)])
        assert rc == 0
        report = json.load(open(out))
        assert report["passed"] is True

    def test_injected_bug_exit_1(self, monkeypatch, tmp_path):
        real = diffopt.analytic_gradients

        def scaled(state, dataset):
            grads = real(state, dataset)
            grads["motion.knots"] = grads["motion.knots"] * 2.0
            return grads

        monkeypatch.setattr(diffopt, "analytic_gradients", scaled)
        out = tmp_path / "gc_bug.json"
        rc = main(["gradcheck", "--out", str(out)])
        assert rc == 1
        assert json.load(open(out))["passed"] is False


class TestHelp:
    def test_help_exits_0_and_documents_config(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for key in ("train.subframes", "train.control_knots", "train.lambda_reg",
                    "motion.tau_s", "rig.n_train", "train.lrs.means", "seed"):
            assert key in out

    def test_sweep_command_listed(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        assert "sweep" in capsys.readouterr().out


class TestSweepCommand:
    def test_sweep_writes_datasets(self, cli_dataset, tmp_path):
        cfg_path, _ = cli_dataset
        out = tmp_path / "sw"
        rc = main(["sweep", "--config", cfg_path, "--out", str(out), "--taus", "0.1,0.2"])
        assert rc == 0
        subdirs = sorted(os.listdir(out))
        assert subdirs == ["tau_0.100", "tau_0.200"]
