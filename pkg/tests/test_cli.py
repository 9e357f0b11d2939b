import csv

import numpy as np
import pytest

from samle.cli import main
from samle.oracles import ObservationSeries


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_simulate_rows(tmp_path):
    assert main(["simulate", "--seed", "3", "--out", str(tmp_path), "--set", "n=10"]) == 0
    s = ObservationSeries.from_csv(tmp_path / "dataset.csv")
    assert s.values.size == 11 and s.values[0] == 700.0


def test_rerun_is_byte_identical(tmp_path):
    args = ["simulate", "--seed", "3", "--out", str(tmp_path), "--set", "n=20", "--set", "record_timing=false"]
    assert main(args) == 0
    first = (tmp_path / "dataset.csv").read_bytes()
    assert main(args + ["--threads", "4"]) == 0
    assert (tmp_path / "dataset.csv").read_bytes() == first
    assert b"seed: 3" in first


def test_bm_estimate_is_mean_increment(tmp_path):
    common = ["--out", str(tmp_path), "--set", "model=bm-drift"]
    assert main(["simulate", "--seed", "5", *common, "--set", "n=50", "--set", "theta0=0.4"]) == 0
    data = ObservationSeries.from_csv(tmp_path / "dataset.csv")
    assert main(["estimate", "--seed", "1", *common, "--set", f"data={tmp_path / 'dataset.csv'}",
                 "--set", "N=2", "--set", "eps=1e-10"]) == 0
    row = _rows(tmp_path / "estimates.csv")[0]
    assert abs(float(row["mu"]) - np.mean(np.diff(data.values))) < 1e-6
    assert (tmp_path / "trace_N2.csv").exists() and (tmp_path / "result_N2.txt").exists()


def test_logistic_estimate_ladder(tmp_path):
    assert main(["estimate", "--out", str(tmp_path), "--set", "n=30", "--set", "Ns=2,5",
                 "--set", "max_evals=200"]) == 0
    rows = _rows(tmp_path / "estimates.csv")
    assert [int(r["N"]) for r in rows] == [2, 5]
    assert "mcse_r" in rows[0] or any(k.startswith("mcse_") for k in rows[0])


def test_surface_points(tmp_path):
    assert main(["surface", "--out", str(tmp_path), "--set", "n=10", "--set", "N=5",
                 "--set", "points=0.1,1000,0.1; 0.05,900,0.1"]) == 0
    rows = _rows(tmp_path / "surface.csv")
    assert len(rows) == 2 and all(np.isfinite(float(r["loglik"])) for r in rows)


def test_validate_selection(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path), "--set", "checks=identity"]) == 0
    assert "identity" in capsys.readouterr().out
    assert len(_rows(tmp_path / "validate.csv")) == 1


@pytest.mark.parametrize("bad", [
    ["--set", "model=nope"],
    ["--set", "box=1,0"],
    ["--set", "start=1,2"],
    ["--set", "noequals"],
])
def test_bad_config_exit_code(tmp_path, bad):
    assert main(["estimate", "--out", str(tmp_path), "--set", "n=5", *bad]) == 2


def test_config_file(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("n = 7\nseed = 9\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert ObservationSeries.from_csv(tmp_path / "dataset.csv").n == 7
