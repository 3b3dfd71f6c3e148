import json
import os

import numpy as np
import pytest
import yaml

from vloss.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def gen_config(tmp_path):
    cfg = {
        "seed": 3,
        "data": {
            "image_size": 64,
            "thing_classes": ["red circle", "blue square"],
            "stuff_classes": ["sky", "grass"],
            "panoptic": {"num_images": 2},
            "detection": {"num_images": 2, "mask_noise": 1},
            "caption": {"num_images": 3},
        },
        "model": {"dim": 16, "queries": 4, "decoder_layers": 1, "encoder_layers": 1, "heads": 2},
        "text": {"dim": 16, "heads": 2, "layers": 1},
        "train": {"epochs": 1, "decay_epochs": [], "dense_batch_size": 2, "caption_batch_size": 3},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestGen:
    def test_gen_writes_splits(self, gen_config, tmp_path):
        out = tmp_path / "data"
        assert run_cli("gen", "--config", str(gen_config), "--out", str(out)) == 0
        for split in ("panoptic", "detection", "caption"):
            assert (out / split / "index.json").exists()
        assert (out / "effective-config.json").exists()

    def test_gen_deterministic(self, gen_config, tmp_path):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        run_cli("gen", "--config", str(gen_config), "--out", str(out1))
        run_cli("gen", "--config", str(gen_config), "--out", str(out2))
        a = (out1 / "panoptic/index.json").read_bytes()
        b = (out2 / "panoptic/index.json").read_bytes()
        assert a == b

    def test_gen_occupied_needs_force(self, gen_config, tmp_path):
        out = tmp_path / "data"
        run_cli("gen", "--config", str(gen_config), "--out", str(out))
        assert run_cli("gen", "--config", str(gen_config), "--out", str(out)) == 1
        assert run_cli("gen", "--config", str(gen_config), "--out", str(out), "--force") == 0

    def test_dry_run_writes_nothing(self, gen_config, tmp_path, capsys):
        out = tmp_path / "data"
        assert run_cli("gen", "--config", str(gen_config), "--out", str(out), "--dry-run") == 0
        assert not out.exists()
        assert "panoptic" in capsys.readouterr().out


class TestTrainEval:
    def test_train_then_eval(self, gen_config, tmp_path):
        data = tmp_path / "data"
        run_cli("gen", "--config", str(gen_config), "--out", str(data))
        run_dir = tmp_path / "run"
        code = run_cli(
            "train", "--config", str(gen_config), "--data", str(data), "--out", str(run_dir), "--smoke"
        )
        assert code == 0
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "last.vlck").exists()
        assert (run_dir / "effective-config.json").exists()

        eval_dir = tmp_path / "eval"
        code = run_cli(
            "eval",
            "--ckpt",
            str(run_dir / "last.vlck"),
            "--split",
            str(data / "panoptic"),
            "--out",
            str(eval_dir),
            "--per-class",
        )
        assert code == 0
        report = json.loads((eval_dir / "report.json").read_text())
        assert "pq" in report and "ap" in report
        assert (eval_dir / "report.csv").exists()

    def test_missing_data_exit_1(self, gen_config, tmp_path):
        assert run_cli("train", "--config", str(gen_config), "--data", str(tmp_path / "nope")) == 1

    def test_missing_checkpoint_exit_code(self, gen_config, tmp_path):
        data = tmp_path / "data"
        run_cli("gen", "--config", str(gen_config), "--out", str(data))
        code = run_cli("eval", "--ckpt", str(tmp_path / "nope.vlck"), "--split", str(data / "panoptic"))
        assert code != 0

    def test_env_seed_override(self, gen_config, tmp_path, monkeypatch):
        data = tmp_path / "data"
        monkeypatch.setenv("VLOSS_SEED", "99")
        run_cli("gen", "--config", str(gen_config), "--out", str(data))
        prov = json.loads((data / "effective-config.json").read_text())
        assert prov["config"]["seed"] == 99


class TestVerify:
    def test_verify_scheduler_exit_0(self, capsys):
        assert run_cli("verify", "scheduler") == 0
        out = capsys.readouterr().out
        assert out.startswith("1..")
        assert "not ok" not in out

    def test_verify_metrics_exit_0(self, capsys):
        assert run_cli("verify", "metrics") == 0
        assert "not ok" not in capsys.readouterr().out

    def test_verify_unknown_suite(self):
        assert run_cli("verify", "nope") != 0


class TestScheduleSim:
    def test_emits_json(self, capsys):
        assert run_cli("schedule-sim", "--strategy", "stt", "--det", "4", "--pan", "4", "--cap", "4") == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["segments"][0]["detection"] == 4
        assert stats["boundary"] == 6
