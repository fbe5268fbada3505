import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

import echodiff.cli as cli
from echodiff.config import load_run_config
from echodiff.data import load_dataset
from echodiff.errors import ConfigurationError
from echodiff.metrics import MetricsReport
from echodiff.sampling import derive_seed, read_video_dir, sample_video, SamplerConfig
from echodiff.training import load_checkpoint, model_from_checkpoint

TINY_TRAIN = [
    "--set", "model.base_width=8",
    "--set", "model.channel_multipliers=[1,2]",
    "--set", "model.time_embed_dim=32",
    "--set", "model.frame_embed_dim=16",
    "--set", "schedule.T=5",
    "--set", "train.max_steps=2",
    "--set", "train.batch_size=2",
    "--set", "train.frames=4",
    "--set", "train.learning_rate=0.001",
    "--set", "train.checkpoint_every=2",
    "--set", "train.log_every=1",
]


@pytest.fixture(scope="module")
def trained_dir(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("train_run")
    rc = cli.main(["train", "--out", str(out), "--data", str(toy_root), *TINY_TRAIN])
    assert rc == 0
    return out


class TestMakeToyData:
    def test_creates_valid_records(self, tmp_path, capsys):
        rc = cli.main(["make-toy-data", "--patients", "3", "--frames", "4",
                       "--size", "32", "--seed", "1", "--out", str(tmp_path / "d")])
        assert rc == 0
        assert len(load_dataset(tmp_path / "d")) == 3
        assert "3 patients" in capsys.readouterr().out

    def test_rerun_same_seed_identical(self, tmp_path):
        for name in ("a", "b"):
            cli.main(["make-toy-data", "--patients", "2", "--frames", "4",
                      "--size", "32", "--seed", "9", "--out", str(tmp_path / name)])
        a = sorted((tmp_path / "a").rglob("*.png"))
        b = sorted((tmp_path / "b").rglob("*.png"))
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_invalid_size_fails_before_writing(self, tmp_path, capsys):
        out = tmp_path / "bad"
        rc = cli.main(["make-toy-data", "--patients", "2", "--frames", "4",
                       "--size", "30", "--out", str(out)])
        assert rc == 1
        assert not out.exists()
        assert "multiple of 8" in capsys.readouterr().err


class TestConfig:
    def test_builtin_defaults(self):
        cfg = load_run_config()
        assert cfg.schedule.T == 1000
        assert cfg.train.learning_rate == 1e-4
        assert cfg.train.batch_size == 24
        assert cfg.sample.guidance_scale == 7.0
        assert cfg.train.cond_drop_prob == 0.1

    def test_precedence_file_then_flags(self, tmp_path):
        f = tmp_path / "run.yaml"
        f.write_text(yaml.safe_dump({"train": {"learning_rate": 5e-4, "seed": 3}}))
        cfg = load_run_config(f, ["train.learning_rate=2e-4"])
        assert cfg.train.learning_rate == 2e-4
        assert cfg.train.seed == 3

    def test_unknown_keys_rejected_exhaustively(self, tmp_path):
        f = tmp_path / "run.yaml"
        f.write_text(yaml.safe_dump({
            "train": {"learning_rte": 1, "batch": 4}, "mdoel": {"x": 1}}))
        with pytest.raises(ConfigurationError) as err:
            load_run_config(f)
        msg = str(err.value)
        assert "learning_rte" in msg and "batch" in msg and "mdoel" in msg

    def test_validation_collects_all_errors(self):
        cfg = load_run_config(None, ["train.learning_rate=-1", "sample.guidance_scale=-2",
                                     "schedule.T=0"])
        with pytest.raises(ConfigurationError) as err:
            cfg.validate()
        msg = str(err.value)
        assert "learning_rate" in msg and "guidance_scale" in msg and "schedule.T" in msg


class TestTrainCommand:
    def test_dry_run_echoes_defaults(self, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(tmp_path / "o"), "--dry-run",
                       "--set", "train.max_steps=100"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "T=1000" in out and "lr=0.0001" in out
        assert (tmp_path / "o" / "resolved_config.yaml").exists()

    def test_frames_flag_threads_through(self, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(tmp_path / "o"), "--dry-run", "--frames", "24",
                       "--set", "train.max_steps=10"])
        assert rc == 0
        assert "K=24" in capsys.readouterr().out
        stamp = yaml.safe_load((tmp_path / "o" / "resolved_config.yaml").read_text())
        assert stamp["train"]["frames"] == 24
        assert stamp["sample"]["frames"] == 24

    def test_missing_max_steps_is_validation_error(self, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(tmp_path / "o"), "--dry-run"])
        assert rc == 1
        assert "max_steps" in capsys.readouterr().err

    def test_training_produces_artifacts(self, trained_dir):
        assert (trained_dir / "ckpt_final.pt").exists()
        assert (trained_dir / "metrics.jsonl").exists()
        assert (trained_dir / "loss_curve.png").exists()
        stamp = (trained_dir / "resolved_config.yaml").read_text()
        assert "code_fingerprint" in stamp

    def test_resume_flag_continues(self, toy_root, trained_dir, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(trained_dir), "--data", str(toy_root),
                       "--resume", *TINY_TRAIN,
                       "--set", "train.max_steps=3"])
        assert rc == 0
        payload = load_checkpoint(trained_dir / "ckpt_final.pt")
        assert payload["step"] == 3

    def test_resume_without_checkpoint(self, toy_root, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(tmp_path / "fresh"), "--data", str(toy_root),
                       "--resume", *TINY_TRAIN])
        assert rc == 1
        assert "no checkpoint" in capsys.readouterr().err


class TestSampleCommand:
    def test_writes_n_directories(self, toy_root, trained_dir, tmp_path, capsys):
        label = toy_root / "patient0001" / "label_ed.png"
        out = tmp_path / "samples"
        rc = cli.main(["sample", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--label-map", str(label), "--out", str(out),
                       "--n", "3", "--seed", "5", "--frames", "4"])
        assert rc == 0
        dirs = sorted(d for d in out.iterdir() if d.is_dir())
        assert [d.name for d in dirs] == ["sample_000", "sample_001", "sample_002"]
        assert "s=7.0" in capsys.readouterr().out
        for d in dirs:
            manifest = json.loads((d / "manifest.json").read_text())
            assert manifest["guidance_scale"] == 7.0
            assert "checkpoint_fingerprint" in manifest
            assert (d / "frame_strip.png").exists()

    def test_cli_matches_api(self, toy_root, trained_dir, tmp_path):
        label = toy_root / "patient0002" / "label_ed.png"
        out = tmp_path / "one"
        rc = cli.main(["sample", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--label-map", str(label), "--out", str(out),
                       "--n", "1", "--seed", "7", "--frames", "4"])
        assert rc == 0
        cli_video, manifest = read_video_dir(out / "sample_000")

        payload = load_checkpoint(trained_dir / "ckpt_final.pt")
        net, sched = model_from_checkpoint(payload)
        cond = cli._load_label_condition(label)
        api_video = sample_video(cond, net, sched,
                                 SamplerConfig(seed=derive_seed(7, 0, 0), frames=4))
        quantized = np.round((api_video.numpy() + 1) * 127.5)
        assert np.array_equal(np.round((cli_video.numpy() + 1) * 127.5), quantized)

    def test_missing_label_map(self, trained_dir, tmp_path, capsys):
        rc = cli.main(["sample", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--label-map", str(tmp_path / "nope.png"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_cascade_requires_sr_checkpoint(self, trained_dir, toy_root, tmp_path, capsys):
        label = toy_root / "patient0001" / "label_ed.png"
        rc = cli.main(["sample", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--label-map", str(label), "--out", str(tmp_path / "o"), "--cascade"])
        assert rc == 1
        assert "sr-checkpoint" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_hermetic_toy_evaluation(self, toy_root, trained_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = cli.main(["evaluate", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--out", str(out), "--data", str(toy_root),
                       "--extractor", "toy", "--n-per-map", "2",
                       "--set", "sample.frames=4",
                       "--set", "data.split_ratios=[0.6,0.2,0.2]",
                       "--set", "schedule.T=5"])
        assert rc == 0
        printed = capsys.readouterr().out
        for col in ("Cond.", "Model", "K", "FID", "FVD", "SSIM"):
            assert col in printed
        report = json.loads((out / "report.json").read_text())
        assert report["n_generated"] == 4  # 2 test maps x 2 replicates
        assert (out / "table.tsv").exists()
        assert (out / "metrics.png").exists()
        assert (out / "example_frames.png").exists()
        tsv = (out / "table.tsv").read_text().splitlines()
        assert tsv[0].split("\t")[:6] == ["cond", "model", "k", "fid", "fvd", "ssim"]

    def test_standard_extractor_requires_backbones(self, trained_dir, toy_root, tmp_path, capsys):
        rc = cli.main(["evaluate", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--out", str(tmp_path / "o"), "--data", str(toy_root),
                       "--extractor", "standard"])
        assert rc == 1
        assert "backbone" in capsys.readouterr().err

    def test_non_finite_metrics_exit_two(self, trained_dir, toy_root, tmp_path, monkeypatch):
        def fake_suite(*a, **kw):
            report = MetricsReport(
                fid=float("nan"), fvd=1.0, mean_ssim=0.5, n_real=1, n_generated=1,
                frame_extractor="x", video_extractor="y", config_fingerprint="z")
            return report, []
        monkeypatch.setattr(cli.metrics_mod, "evaluate_suite", fake_suite)
        rc = cli.main(["evaluate", "--checkpoint", str(trained_dir / "ckpt_final.pt"),
                       "--out", str(tmp_path / "o"), "--data", str(toy_root),
                       "--set", "data.split_ratios=[0.6,0.2,0.2]"])
        assert rc == 2


class TestConvertCamusCommand:
    def test_empty_source_fails(self, tmp_path, capsys):
        (tmp_path / "src").mkdir()
        rc = cli.main(["convert-camus", "--src", str(tmp_path / "src"),
                       "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "no convertible" in capsys.readouterr().err


def test_module_entrypoint_help():
    proc = subprocess.run([sys.executable, "-m", "echodiff", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("make-toy-data", "convert-camus", "train", "sample", "evaluate"):
        assert cmd in proc.stdout
