import subprocess
import sys

from hideseek import cli, pipeline

SMALL = ["--seed", "7", "--set", "counts=(120, 64, 9)", "--set", "latent.d=10"]


def test_stage_by_stage_matches_run_all(tmp_path, capsys):
    staged = tmp_path / "staged"
    for cmd in ("generate", "train", "segment", "evaluate", "ablate", "render"):
        assert cli.main([cmd, "--out", str(staged), *SMALL]) == 0
    assert cli.main(["run-all", "--out", str(tmp_path / "whole"), *SMALL]) == 0
    for rel in ("reports/metrics.csv", "reports/comparison.csv", "reports/ablation_delta_auc.csv",
                "segmentations/lesion_analysis.csv"):
        assert (staged / rel).read_bytes() == (tmp_path / "whole" / rel).read_bytes()
    assert len(list((staged / "overlays" / "otsu").glob("*.ppm"))) == 9
    assert "run complete" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert "[config]" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 2


def test_stage_error_exit_code(tmp_path, capsys):
    assert cli.main(["evaluate", "--out", str(tmp_path)]) == 1
    assert "[evaluate]" in capsys.readouterr().err


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.OUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["generate", *SMALL]) == 0
    assert (tmp_path / "env_out" / "dataset" / "manifest.json").exists()


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "hideseek.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in cli.COMMANDS:
        assert cmd in out.stdout
