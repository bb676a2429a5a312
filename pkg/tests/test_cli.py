import csv
import subprocess
import sys

import numpy as np
import pytest

from sdf_surrogate import geometry
from sdf_surrogate.config import load_config
from sdf_surrogate.surrogate import relative_l2

SMOKE = """\
[geometry]
family = Disk
n_train = 6
n_phys = 6
n_test = 2
n_vertices = 128
[sdf_data]
n_boundary = 400
n_grid = 10
[sdf_model]
sdf_hidden = 16,16
sdf_adam_epochs = 30
sdf_lbfgs_max_iter = 40
batch_shapes = 6
points_per_shape = 150
lbfgs_points_per_shape = 150
[inference]
restarts = 2
infer_max_iter = 60
[fom]
h = 0.03125
[phys]
phys_hidden = 10,6
phys_points = 120
phys_adam_epochs = 10
batch_points = 200
phys_lbfgs_max_iter = 60
[eval]
n_eval_points = 100
grid_n = 61
n_reference_points = 500
"""

STAGES = ["gen", "train-sdf", "infer-codes", "reconstruct", "train-phys", "eval"]


def run_cli(*args, env_log="quiet"):
    import os

    env = dict(os.environ, SDF_SURROGATE_LOG=env_log)
    return subprocess.run([sys.executable, "-m", "sdf_surrogate.cli", *map(str, args)],
                          capture_output=True, text=True, env=env)


def summary(stdout: str) -> dict[str, str]:
    line = stdout.strip().splitlines()[-1]
    return dict(item.split("=", 1) for item in line.split())


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.ini"
    cfg.write_text(SMOKE)
    out = root / "run"
    results = {}
    for stage in STAGES:
        res = run_cli(stage, "--config", cfg, "--out", out)
        assert res.returncode == 0, f"{stage}: {res.stderr}"
        results[stage] = summary(res.stdout)
    return cfg, out, results


def test_gen_outputs_and_counts(pipeline_run):
    cfg, out, res = pipeline_run
    shapes = geometry.read_shapes(out / "shapes.txt")
    assert len(shapes) == 6 and len(geometry.read_shapes(out / "test_shapes.txt")) == 2
    with open(out / "sdf_train.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["shape_id", "x", "y", "sdf"]
    per_shape = 400 + 10 * 10
    assert len(rows) - 1 == 6 * per_shape
    assert sorted({int(r[0]) for r in rows[1:]}) == [s.shape_id for s in shapes]
    assert all((out / f"fom_{s.shape_id}.csv").exists() for s in shapes)
    assert (out / "phys_train.csv").exists()
    assert int(res["gen"]["n_shapes"]) == 6


def test_gen_is_deterministic(pipeline_run, tmp_path):
    cfg, out, _ = pipeline_run
    again = tmp_path / "again"
    assert run_cli("gen", "--config", cfg, "--out", again).returncode == 0
    for name in ("shapes.txt", "test_shapes.txt", "sdf_train.csv", "phys_train.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_resolved_config_is_complete(pipeline_run):
    _, out, _ = pipeline_run
    for stage in STAGES:
        cfg = load_config(out / f"resolved_{stage}.ini")
        assert cfg.n_train == 6 and cfg.k == 3


def test_codes_file(pipeline_run):
    _, out, res = pipeline_run
    with open(out / "codes.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["shape_id", "objective", "z1", "z2", "z3"]
    assert len(rows) == 3
    assert float(res["infer-codes"]["mean_objective"]) == pytest.approx(
        np.mean([float(r[1]) for r in rows[1:]]), rel=1e-12)


def test_reconstruct_summary_matches_report(pipeline_run):
    _, out, res = pipeline_run
    with open(out / "cd_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    ok = [float(r["cd"]) for r in rows if r["failed"] == "0"]
    assert abs(float(res["reconstruct"]["mean_cd"]) - np.mean(ok)) < 1e-12
    for r in rows:
        if r["failed"] == "0":
            pts = np.loadtxt(out / f"recon_{r['shape_id']}.csv", delimiter=",", skiprows=1)
            assert pts.ndim == 2 and pts.shape[1] == 2


def test_eval_summary_matches_point_dumps(pipeline_run):
    _, out, res = pipeline_run
    with open(out / "eval_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["shape_id"] == "all"
    refs, preds = [], []
    for r in rows[:-1]:
        data = np.loadtxt(out / f"pred_{r['shape_id']}.csv", delimiter=",", skiprows=1)
        assert len(data) == int(r["n_points"]) == 100
        refs.append(data[:, 2])
        preds.append(data[:, 3])
    agg = relative_l2(np.concatenate(preds), np.concatenate(refs))
    assert abs(float(res["eval"]["rel_l2"]) - agg) < 1e-12
    assert abs(float(rows[-1]["rel_l2"]) - agg) < 1e-12


def test_error_raster_is_pgm(pipeline_run):
    _, out, _ = pipeline_run
    tests = geometry.read_shapes(out / "test_shapes.txt")
    raw = (out / f"field_{tests[0].shape_id}.pgm").read_bytes()
    lines = raw.split(b"\n", 4)
    assert lines[0] == b"P5" and lines[1].startswith(b"# max_abs_err=")
    w, h = map(int, lines[2].split())
    assert (w, h) == (65, 65) and lines[3] == b"255"
    img = np.frombuffer(lines[4], dtype=np.uint8)
    assert img.size == w * h and img.max() == 255


def test_stale_config_is_refused(pipeline_run, tmp_path):
    cfg, out, _ = pipeline_run
    res = run_cli("infer-codes", "--config", cfg, "--out", out, "--set", "sdf_adam_epochs=31")
    assert res.returncode == 2
    assert "stale" in res.stderr and "sdf_model.ckpt" in res.stderr and "train-sdf" in res.stderr


def test_modified_artifact_is_refused(pipeline_run, tmp_path):
    cfg, out, _ = pipeline_run
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    with open(copy / "codes.csv", "a") as fh:
        fh.write("\n")
    res = run_cli("reconstruct", "--config", cfg, "--out", copy)
    assert res.returncode == 2 and "codes.csv" in res.stderr and "modified" in res.stderr


def test_missing_prerequisite(tmp_path):
    res = run_cli("train-sdf", "--out", tmp_path / "empty")
    assert res.returncode == 2 and "missing" in res.stderr


def test_unknown_key_rejected(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sdf_model]\nlatent_size = 3\n")
    res = run_cli("gen", "--config", bad, "--out", tmp_path / "o")
    assert res.returncode == 2 and "latent_size" in res.stderr
    res = run_cli("gen", "--out", tmp_path / "o", "--set", "nope=1")
    assert res.returncode == 2 and "nope" in res.stderr


def test_bad_log_level(tmp_path):
    res = run_cli("gen", "--out", tmp_path / "o", env_log="loud")
    assert res.returncode == 2 and "SDF_SURROGATE_LOG" in res.stderr


def test_sweep_report(pipeline_run, tmp_path):
    cfg, _, _ = pipeline_run
    out = tmp_path / "sweep"
    res = run_cli("sweep", "--config", cfg, "--out", out, "--key", "k", "--values", "1,2",
                  "--set", "n_test=1")
    assert res.returncode == 0, res.stderr
    lines = (out / "sweep_report.csv").read_text().splitlines()
    assert lines[0] == "k,mean_cd"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    assert all(np.isfinite(float(line.split(",")[1])) for line in lines[1:])
