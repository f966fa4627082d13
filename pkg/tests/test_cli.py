import csv
import json

import numpy as np
import pytest

from pqkd import experiments as ex
from pqkd.cli import main
from pqkd.data import Dataset, write_idx
from pqkd.errors import ConfigurationError

TINY = """\
# tiny desk-check run
n_train = 100
n_val = 40
n_test = 40
widths = 4, 8, 8
ranks = 2
dim_theta = 15
shots = 50
epochs_teacher = 1
epochs_student = 2
theta_updates = 1
val_batches = 1
stats_evals = 4
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_selftest_passes(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 9
    assert list(tmp_path.iterdir()) == []


def test_missing_config_exits_2(capsys, tmp_path):
    missing = tmp_path / "nope.cfg"
    assert main(["train-pqkd", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_and_subcommand_exit_2(capsys):
    for argv in (["train-pqkd", "--bogus"], ["frobnicate"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_bad_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_speed = 3\n")
    assert main(["train-teacher", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_train_pqkd_outputs(cfg_path, tmp_path):
    out = tmp_path / "run"
    assert main(["train-pqkd", "--config", str(cfg_path), "--out", str(out), "--ema", "on", "--seed", "3"]) == 0
    metrics = rows(out / "metrics.csv")
    assert sum(r["split"] == "train" for r in metrics) == 2
    assert sum(r["split"] == "val" for r in metrics) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"] == 1 and manifest["command"] == "train-pqkd"
    assert manifest["seeds"] == [3] and manifest["config"]["ema"] is True
    assert manifest["config"]["widths"] == [4, 8, 8] and len(manifest["input_hash"]) == 64
    params = json.loads((out / "params.json").read_text())
    assert set(params) >= {"scope", "ranks", "dim_theta", "teacher_total", "student_total", "cr_overall", "cr_conv"}
    trace = rows(out / "feature_trace.csv")
    assert len(trace) == 2 * 512 and list(trace[0]) == ["epoch", "dim", "z_raw", "z_used"]
    assert (out / "student.npz").exists() and (out / "summary.json").exists()

    assert main(["report", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["rows"] == 4 and "ema" in report
    assert (out / "ema_cdf.csv").exists()


def test_teacher_checkpoint_reuse(cfg_path, tmp_path):
    t_out, s_out = tmp_path / "t", tmp_path / "s"
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(t_out)]) == 0
    assert [r["epoch"] for r in rows(t_out / "metrics.csv")] == ["0", "1", "1"]
    assert main(["train-pqkd", "--config", str(cfg_path), "--out", str(s_out),
                 "--teacher", str(t_out / "teacher.npz"), "--baseline", "fixedtheta"]) == 0
    assert json.loads((s_out / "summary.json").read_text())["spsa_evaluations"] == 0


def test_metrics_are_byte_identical_across_runs(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert main(["train-pqkd", "--config", str(cfg_path), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_shot_study_outputs(tmp_path):
    path = tmp_path / "shot.cfg"
    path.write_text(TINY + "shots_grid = 50, 100, 200\nnoise_reps = 3\nepochs_student = 1\n")
    out = tmp_path / "shot"
    assert main(["shot-study", "--config", str(path), "--out", str(out)]) == 0
    assert len(rows(out / "feature_noise.csv")) == 3
    assert len(rows(out / "shot_runs.csv")) == 6
    table = rows(out / "shot_delta.csv")
    assert {r["ema"] for r in table} == {"on", "off"}
    fit = json.loads((out / "fit.json").read_text())
    assert set(fit["fits"]) == {"on", "off"}


def test_sweep_and_noise_study(tmp_path):
    path = tmp_path / "sweep.cfg"
    path.write_text(TINY + "epochs_student = 1\nsweep_scopes = conv1\nsweep_ranks = 2\nsweep_dim_theta = 15\n"
                    "sigma_z_grid = 0, 1\nsigma_theta_grid = 0.1\n")
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "sw")]) == 0
    (row,) = rows(tmp_path / "sw" / "frontier.csv")
    assert row["scope"] == "conv1" and float(row["cr_overall"]) > 0
    assert main(["noise-study", "--config", str(path), "--out", str(tmp_path / "ns")]) == 0
    noise = rows(tmp_path / "ns" / "noise.csv")
    assert [(r["sigma_z"], r["sigma_theta"]) for r in noise] == [("0.0", "0.0"), ("1.0", "0.0"), ("0.0", "0.1")]


def test_report_without_run_files_exits_2(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_config_parsing():
    values = ex.parse_config_text("scope = conv12  # comment\nranks = 4,2\nema = on\n")
    cfg = ex.RunConfig(**values)
    assert cfg.scope == "conv12" and cfg.ranks == (4, 2) and cfg.ema is True
    with pytest.raises(ConfigurationError):
        ex.parse_config_text("no equals sign")
    with pytest.raises(ConfigurationError):
        ex.RunConfig(widths="1,2")
    with pytest.raises(ConfigurationError):
        ex.RunConfig(ema="maybe")


def test_workers_env(monkeypatch):
    monkeypatch.setenv(ex.WORKERS_ENV, "3")
    assert ex.workers() == 3
    monkeypatch.setenv(ex.WORKERS_ENV, "lots")
    with pytest.raises(ConfigurationError):
        ex.workers()


def test_idx_dataset_config(tmp_path):
    rng = np.random.default_rng(0)
    for split_name, n in (("train", 60), ("test", 20)):
        ds = Dataset(rng.integers(0, 256, size=(n, 1, 28, 28)) / 255.0, rng.integers(0, 10, size=n))
        write_idx(ds, *(tmp_path / f for f in ex.IDX_FILES[split_name]))
    cfg = ex.RunConfig(dataset="idx", data_dir=str(tmp_path), n_train=40, n_val=20, n_test=10)
    train, val, test = ex.load_data(cfg)
    assert (len(train), len(val), len(test)) == (40, 20, 10)
    assert len(ex.input_files(cfg)) == 4
