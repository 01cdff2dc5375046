import csv
import json
import os

import numpy as np
import pytest

from splinegee.cli import main, parse_knot_grid

from conftest import random_dataset, write_cd4_like
from splinegee.data import write_csv

CD4_FLAGS = ["--cluster", "id", "--response", "cd4", "--x", "smoking,drug,partners,depression", "--t", "time,age"]


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def announced(out):
    return [line.split("wrote ", 1)[1] for line in out.splitlines() if line.startswith("wrote ")]


def test_knot_grid_parsing():
    assert parse_knot_grid("0:3", 2) == [0, 1, 2, 3]
    assert parse_knot_grid("0:2,1:3", 2) == [[0, 1, 2], [1, 2, 3]]
    assert parse_knot_grid("2", 1) == [2]
    with pytest.raises(ValueError):
        parse_knot_grid("0:2,0:2,0:2", 2)


def test_fit_cd4_schema(tmp_path, capsys):
    data = write_cd4_like(tmp_path / "cd4.csv")
    out = tmp_path / "out"
    code = main(["fit", str(data), *CD4_FLAGS, "--link", "log", "--corr", "ex", "--cv", "--knot-grid", "0:4",
                 "--info-matrix", "--out", str(out)])
    assert code == 0
    coef = read_table(out / "coefficients.csv")
    assert [r["parameter"] for r in coef] == ["(Intercept)", "smoking", "drug", "partners", "depression"]
    assert all(float(r["se"]) > 0 for r in coef)
    curves = read_table(out / "curves.csv")
    assert [sum(r["dimension"] == d for r in curves) for d in ("time", "age")] == [100, 100]
    assert len(read_table(out / "cv_scores.csv")) == 5
    assert len(read_table(out / "info_inv.csv")) == 5
    summary = {r["key"]: r["value"] for r in read_table(out / "fit_summary.csv")}
    assert summary["structure"] == "ex" and summary["converged"] == "1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "fit"
    assert manifest["inputs"][str(data)]
    written = announced(capsys.readouterr().out)
    assert sorted(os.path.basename(p) for p in written) == sorted(os.listdir(out))
    assert all(os.path.abspath(p).startswith(str(out)) for p in written)


def test_fit_ar1_without_pairs_falls_back(tmp_path):
    rng = np.random.default_rng(0)
    ds = random_dataset(rng, n=40, max_m=1)
    path = tmp_path / "single.csv"
    write_csv(ds, path)
    out = tmp_path / "out"
    assert main(["fit", str(path), "--x", "x1", "--t", "t1,t2", "--corr", "ar1", "--knots", "2", "--out", str(out)]) == 0
    summary = {r["key"]: r["value"] for r in read_table(out / "fit_summary.csv")}
    assert summary["structure"] == "wi"
    assert "using wi" in summary["diagnostics"]


def test_fit_ar1_fixed_rho(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "d.csv"
    write_csv(random_dataset(rng, n=40, min_m=3), path)
    out = tmp_path / "out"
    assert main(["fit", str(path), "--x", "x1", "--t", "t1,t2", "--order", "order", "--corr", "ar1", "--rho", "0.3",
                 "--out", str(out)]) == 0
    summary = {r["key"]: r["value"] for r in read_table(out / "fit_summary.csv")}
    assert float(summary["rho"]) == 0.3


def test_malformed_cell_exit_one(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("cluster,y,t1\n1,1.0,0.2\n1,oops,0.3\n")
    assert main(["fit", str(path), "--t", "t1", "--out", str(tmp_path / "o")]) == 1
    assert "row 3" in capsys.readouterr().err


def test_missing_column_exit_one(tmp_path, capsys):
    path = tmp_path / "d.csv"
    path.write_text("cluster,y,t1\n1,1.0,0.2\n")
    assert main(["fit", str(path), "--t", "age", "--out", str(tmp_path / "o")]) == 1
    assert "'age'" in capsys.readouterr().err


def test_missing_file_and_bad_usage(tmp_path):
    assert main(["fit", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 1
    assert main(["fit"]) == 1
    assert main(["bogus"]) == 1


def test_non_convergence_exit_two(tmp_path):
    path = write_cd4_like(tmp_path / "cd4.csv", n=30)
    out = tmp_path / "out"
    assert main(["fit", str(path), *CD4_FLAGS, "--link", "log", "--max-iter", "1", "--out", str(out)]) == 2
    summary = {r["key"]: r["value"] for r in read_table(out / "fit_summary.csv")}
    assert summary["converged"] == "0"
    assert (out / "coefficients.csv").exists() and (out / "manifest.json").exists()


SIM = ["simulate", "--setup", "s1", "--n", "100", "--rho", "0.5", "--reps", "10", "--seed", "7", "--fixed-knots", "2"]


def test_simulate_twice_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SIM + ["--out", str(a)]) == 0
    assert main(SIM + ["--out", str(b)]) == 0
    for name in ("replications.csv", "aggregate.csv", "aggregate_x1e5.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_structures_layout(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--setup", "s1", "--n", "60", "--rho", "0.5", "--reps", "3", "--fixed-knots", "2",
                 "--structures", "wi,ar1", "--out", str(out)]) == 0
    rows = read_table(out / "aggregate.csv")
    assert [(r["structure"], r["parameter"]) for r in rows] == [
        (s, p) for s in ("wi", "ar1") for p in ("beta0", "beta1", "f1", "f2")]
    scaled = read_table(out / "aggregate_x1e5.csv")
    assert [r["method"] for r in scaled] == ["WI", "AR1"]
    written = announced(capsys.readouterr().out)
    assert sorted(os.path.basename(p) for p in written) == sorted(os.listdir(out))


@pytest.mark.parametrize("extra", [["--reps", "0"], ["--rho", "1.5"], ["--setup", "s9"]])
def test_simulate_invalid_exit_one(tmp_path, extra):
    args = ["simulate", "--setup", "s1", "--n", "50", "--rho", "0.5", "--reps", "2"]
    assert main(args + extra + ["--out", str(tmp_path / "o")]) == 1


def test_config_precedence_and_manifest_replay(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"setup": "s3", "n": 40, "rho": 0.3, "replications": 3, "seed": 5, "fixed_knots": 2}))
    a = tmp_path / "a"
    assert main(["simulate", "--config", str(cfg), "--reps", "2", "--out", str(a)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["replications"] == 2  # flag beats file
    assert manifest["config"]["setup"] == "s3" and manifest["config"]["rho"] == 0.3  # file beats default
    assert manifest["inputs"][str(cfg)]
    b = tmp_path / "b"
    assert main(["simulate", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "aggregate.csv").read_bytes() == (b / "aggregate.csv").read_bytes()


def test_default_output_directory_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "env_out"
    monkeypatch.setenv("SPLINEGEE_OUTPUT_DIR", str(target))
    assert main(["simulate", "--setup", "s1", "--n", "30", "--rho", "0.2", "--reps", "1", "--fixed-knots", "1"]) == 0
    assert (target / "aggregate.csv").exists()
