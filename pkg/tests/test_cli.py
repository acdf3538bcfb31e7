import json
import subprocess
import sys

import numpy as np
import pytest

from dtegan.cli import main, render_markdown_table
from dtegan.trainer import TrainConfig


def run_cli(*args):
    proc = subprocess.run([sys.executable, "-m", "dtegan.cli", *args],
                          capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


TINY = dict(resolution=32, ch=8, d_z=16, d_s=32, d_c=16, batch_size=4,
            n_items=12, epochs=1, seed=3, dataset_seed=0)


def _write_config(path, **overrides):
    cfg = TrainConfig(**{**TINY, **overrides})
    path.write_text(json.dumps(cfg.to_dict()))
    return cfg


class TestDispatch:
    def test_help_exits_zero(self):
        code, out, _ = run_cli("--help")
        assert code == 0
        assert "dte" in out and "train" in out

    def test_unknown_subcommand_is_usage_error(self):
        code, _, err = run_cli("frobnicate")
        assert code == 2

    def test_unknown_flag_is_usage_error(self):
        code, _, _ = run_cli("report", "--nope")
        assert code == 2

    def test_missing_config_names_path(self, tmp_path):
        code, _, err = run_cli("train", "--config", str(tmp_path / "missing.cfg"))
        assert code == 1
        assert "missing.cfg" in err
        assert err.startswith("error:")


class TestDataSynth:
    def test_writes_manifest_and_images(self, tmp_path):
        out = tmp_path / "data"
        code, stdout, _ = run_cli("data", "synth", "--n", "4", "--resolution", "32",
                                  "--seed", "5", "--out", str(out))
        assert code == 0
        manifest = out / "manifest.jsonl"
        assert manifest.exists()
        lines = manifest.read_text().splitlines()
        assert len(lines) == 4
        rec = json.loads(lines[0])
        assert (out / rec["image"]).exists()
        assert len(rec["captions"]) >= 2

    def test_bad_args(self, tmp_path):
        code, _, err = run_cli("data", "synth", "--n", "0", "--out", str(tmp_path))
        assert code == 1 and "error:" in err


class TestTrainEvalGenerate:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("cli_run")
        cfg_path = tmp / "config.json"
        _write_config(cfg_path)
        code, stdout, err = run_cli("train", "--config", str(cfg_path),
                                    "--run-dir", str(tmp / "run"), "--quiet")
        assert code == 0, err
        return tmp / "run"

    def test_train_artifacts(self, run_dir):
        assert (run_dir / "config.json").exists()
        assert (run_dir / "checkpoints" / "final.pt").exists()
        assert (run_dir / "checkpoints" / "ema.pt").exists()
        assert (run_dir / "metrics.log").exists()

    def test_eval_writes_report(self, run_dir, tmp_path):
        out = tmp_path / "report.json"
        code, _, err = run_cli("eval", "--ckpt", str(run_dir / "checkpoints" / "final.pt"),
                               "--pool-size", "5", "--d-f", "8", "--out", str(out))
        assert code == 0, err
        report = json.loads(out.read_text())
        assert set(report) >= {"r_precision", "fid", "config_hash", "seed"}

    def test_generate_writes_pngs(self, run_dir, tmp_path):
        caps = tmp_path / "caps.txt"
        caps.write_text("a small red circle\na large blue square\n")
        out = tmp_path / "samples"
        code, _, err = run_cli("generate", "--ckpt",
                               str(run_dir / "checkpoints" / "ema.pt"),
                               "--captions", str(caps), "--psi", "2.0",
                               "--out-dir", str(out))
        assert code == 0, err
        files = sorted(out.glob("*.png"))
        assert len(files) == 2

    def test_resume_from_checkpoint(self, run_dir, tmp_path):
        cfg_path = tmp_path / "config2.json"
        _write_config(cfg_path, epochs=2)
        code, _, err = run_cli("train", "--config", str(cfg_path),
                               "--resume", str(run_dir / "checkpoints" / "final.pt"),
                               "--run-dir", str(tmp_path / "resumed"),
                               "--force", "--quiet")
        assert code == 0, err


class TestAblateAndReport:
    def test_ablate_then_report(self, tmp_path):
        cfg_path = tmp_path / "base.json"
        _write_config(cfg_path)
        grid_path = tmp_path / "grid.json"
        grid_path.write_text(json.dumps([
            {"name": "routed", "flags": {"sd_to_g": True, "sg_to_d": False}},
        ]))
        out_csv = tmp_path / "table.csv"
        code, _, err = run_cli("ablate", "--config", str(cfg_path),
                               "--grid", str(grid_path), "--seeds", "0",
                               "--pool-size", "4", "--out", str(out_csv), "--quiet")
        assert code == 0, err
        assert out_csv.exists()
        code, stdout, err = run_cli("report", "--in", str(out_csv),
                                    "--format", "markdown")
        assert code == 0, err
        assert stdout.startswith("| variant | seed |")
        assert "routed" in stdout

    def test_report_missing_input(self, tmp_path):
        code, _, err = run_cli("report", "--in", str(tmp_path / "no.csv"))
        assert code == 1 and "no.csv" in err


class TestMarkdownGolden:
    def test_golden_rendering(self):
        rows = [
            {"variant": "dual_routed", "seed": "0", "r_precision": "0.85", "fid": "1.23"},
            {"variant": "dual_routed", "seed": "mean", "r_precision": "0.9", "fid": "1.2"},
        ]
        out = render_markdown_table(rows, ["variant", "seed", "r_precision", "fid"])
        assert out == (
            "| variant | seed | r_precision | fid |\n"
            "| --- | --- | --- | --- |\n"
            "| dual_routed | 0 | 0.85 | 1.23 |\n"
            "| dual_routed | mean | 0.9 | 1.2 |"
        )

    def test_in_process_main_report(self, tmp_path, capsys):
        csv_path = tmp_path / "t.csv"
        csv_path.write_text("a,b\n1,2\n")
        assert main(["report", "--in", str(csv_path), "--format", "markdown"]) == 0
        out = capsys.readouterr().out
        assert out == "| a | b |\n| --- | --- |\n| 1 | 2 |\n"
