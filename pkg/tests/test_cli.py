import json

import numpy as np
import pytest
from click.testing import CliRunner

import pcbdet.cli as cli_mod
from pcbdet.cli import main
from pcbdet.config import RunConfig
from pcbdet.evaluate import REPORT_COLUMNS, parse_training_curves
from pcbdet.train import DivergenceError


def write_config(path, **overrides):
    cfg = RunConfig(
        synth_boards=10, val_fraction=0.2, epochs=1, batch_size=4,
        synth_class_weights=[0, 0, 0, 1, 0, 0],
        gan_patch_size=16, gan_latent_dim=8, gan_batch=4, gan_steps=4,
        gan_fidelity_gate=10.0, augment_boards=3, seed=0)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    path.write_text(cfg.to_json())
    return cfg


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One full pipeline pass shared by the read-only assertions below."""
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "cfg.json"
    write_config(cfg_path, out_dir=str(out))
    runner = CliRunner()
    for cmd in (["synth-data"], ["train-gan"], ["augment"], ["train"],
                ["eval"], ["detect"], ["report"]):
        result = runner.invoke(main, cmd + ["--config", str(cfg_path)])
        assert result.exit_code == 0, (cmd, result.output)
    return out


class TestPipeline:
    def test_dataset_written(self, run_dir):
        manifest = json.loads((run_dir / "dataset" / "manifest.json").read_text())
        ids = {e["id"] for e in manifest}
        assert sum(e["source"] == "synthetic" for e in manifest) == 10
        # augment appended gan-composited boards to the train split
        gan = [e for e in manifest if e["source"] == "gan_composited"]
        assert len(gan) == 3
        assert all(e["split"] == "train" for e in gan)
        assert len(ids) == len(manifest)

    def test_stamp_and_config_echoed(self, run_dir):
        stamp = json.loads((run_dir / "stamp.json").read_text())
        assert set(stamp) == {"config_hash", "seed"}
        echoed = RunConfig.from_json((run_dir / "config.json").read_text())
        assert echoed.config_hash() == stamp["config_hash"]

    def test_gan_stats_written(self, run_dir):
        stats = json.loads((run_dir / "gan_stats.json").read_text())
        assert "short" in stats
        assert set(stats["short"]) == {"d_mean", "d_std", "moment_distance"}

    def test_train_artifacts(self, run_dir):
        assert (run_dir / "checkpoint.pcbd").exists()
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "thresholds.json").exists()
        curves = parse_training_curves((run_dir / "curves.csv").read_text())
        assert [(r["epoch"], r["split"]) for r in curves] == \
            [(0, "train"), (0, "val")]

    def test_eval_report(self, run_dir):
        text = (run_dir / "report.txt").read_text()
        assert text.splitlines()[0] == "\t".join(REPORT_COLUMNS)
        rows = json.loads((run_dir / "report.json").read_text())["rows"]
        assert rows[0]["class_name"] == "all"

    def test_detections_written(self, run_dir):
        files = sorted((run_dir / "detections").glob("*.json"))
        assert len(files) == 2  # val split of 10 boards at 0.2
        payload = json.loads(files[0].read_text())
        assert set(payload) == {"id", "detections"}
        for det in payload["detections"]:
            assert set(det) == {"box", "score", "class"}

    def test_report_rerender_identical(self, run_dir):
        before = (run_dir / "report.txt").read_text()
        result = CliRunner().invoke(main, ["report", "--out", str(run_dir)])
        assert result.exit_code == 0
        assert (run_dir / "report.txt").read_text() == before


class TestDeterminism:
    def test_synth_data_reproducible(self, tmp_path):
        runner = CliRunner()
        manifests = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg_path = tmp_path / f"{name}.json"
            write_config(cfg_path, out_dir=str(out))
            result = runner.invoke(main, ["synth-data", "--config", str(cfg_path)])
            assert result.exit_code == 0
            img = sorted((out / "dataset" / "images").glob("*.png"))[0]
            manifests.append((json.loads(
                (out / "dataset" / "manifest.json").read_text()),
                img.read_bytes()))
        a, b = manifests
        assert [e["id"] for e in a[0]] == [e["id"] for e in b[0]]
        assert [e["split"] for e in a[0]] == [e["split"] for e in b[0]]
        assert a[1] == b[1]

    def test_train_curves_reproducible(self, tmp_path):
        runner = CliRunner()
        curves = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg_path = tmp_path / f"{name}.json"
            write_config(cfg_path, out_dir=str(out))
            assert runner.invoke(
                main, ["synth-data", "--config", str(cfg_path)]).exit_code == 0
            assert runner.invoke(
                main, ["train", "--config", str(cfg_path)]).exit_code == 0
            curves.append((out / "curves.csv").read_text())
        assert curves[0] == curves[1]

    def test_seed_flag_changes_data(self, tmp_path):
        runner = CliRunner()
        boards = []
        for seed in (1, 2):
            out = tmp_path / f"s{seed}"
            cfg_path = tmp_path / f"s{seed}.json"
            write_config(cfg_path, out_dir=str(out))
            result = runner.invoke(main, ["synth-data", "--config", str(cfg_path),
                                          "--seed", str(seed)])
            assert result.exit_code == 0
            img = sorted((out / "dataset" / "images").glob("*.png"))[0]
            boards.append(img.read_bytes())
        assert boards[0] != boards[1]


class TestExitCodes:
    def test_usage_error_without_dataset(self, tmp_path):
        result = CliRunner().invoke(main, ["train", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_usage_error_without_checkpoint(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path, out_dir=str(tmp_path))
        runner = CliRunner()
        assert runner.invoke(main,
                             ["synth-data", "--config", str(cfg_path)]).exit_code == 0
        result = runner.invoke(main, ["eval", "--config", str(cfg_path)])
        assert result.exit_code == 2

    def test_usage_error_augment_before_gan(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path, out_dir=str(tmp_path))
        runner = CliRunner()
        assert runner.invoke(main,
                             ["synth-data", "--config", str(cfg_path)]).exit_code == 0
        result = runner.invoke(main, ["augment", "--config", str(cfg_path)])
        assert result.exit_code == 2

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path, out_dir=str(tmp_path))
        runner = CliRunner()
        assert runner.invoke(main,
                             ["synth-data", "--config", str(cfg_path)]).exit_code == 0

        def blow_up(*args, **kwargs):
            raise DivergenceError("synthetic divergence")

        monkeypatch.setattr(cli_mod, "train_detector", blow_up)
        result = runner.invoke(main, ["train", "--config", str(cfg_path)])
        assert result.exit_code == 3

    def test_missing_config_file(self):
        result = CliRunner().invoke(main, ["synth-data", "--config",
                                           "/nonexistent/cfg.json"])
        assert result.exit_code == 2
