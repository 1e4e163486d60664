import json

import numpy as np
import pytest

from askrylov.cli import main, parse_config_file
from askrylov.linop import read_matrix_market


def _strip_timestamp(path):
    return [line for line in open(path) if not line.startswith("# timestamp")]


def test_gen_matrix_defaults_and_metadata(tmp_path):
    out = tmp_path / "m.mtx"
    rc = main(["gen-matrix", "--n", "50", "--output", str(out)])
    assert rc == 0
    m = read_matrix_market(out)
    assert m.n == 50
    meta = json.loads((tmp_path / "m.mtx.meta.json").read_text())
    assert meta["density"] == 0.16 and meta["diag"] == 10.0
    assert "gaussian_method" in meta


def test_gen_matrix_zero_density_identity(tmp_path):
    out = tmp_path / "i.mtx"
    rc = main(["gen-matrix", "--n", "4", "--density", "0", "--output", str(out)])
    assert rc == 0
    assert np.allclose(read_matrix_market(out).to_dense(), 100.0 * np.eye(4))


def test_solve_deterministic_and_randomized(tmp_path, capsys):
    out = tmp_path / "m.mtx"
    main(["gen-matrix", "--n", "40", "--diag", "8", "--output", str(out)])
    rc = main(["solve", "--matrix", str(out), "--seed", "3"])
    assert rc == 0
    assert "deterministic" in capsys.readouterr().out
    rc = main(["solve", "--matrix", str(out), "--seed", "3", "--eta", "5.0"])
    assert rc == 0
    assert "adaptive" in capsys.readouterr().out


def test_tradeoff_csv_and_determinism_across_workers(tmp_path):
    args = ["tradeoff", "--n", "30", "--diag", "6", "--trials", "400",
            "--seed", "5", "--eta-grid", "2,5", "--rr-lambda-grid", "0.1",
            "--rr-min-iters-grid", "0,4"]
    out1 = tmp_path / "a"
    rc = main(args + ["--output", str(out1), "--workers", "1"])
    assert rc == 0
    out2 = tmp_path / "b"
    rc = main(args + ["--output", str(out2), "--workers", "4"])
    assert rc == 0
    for suffix in ["as", "rr0.1"]:
        lines1 = _strip_timestamp(f"{out1}_{suffix}.csv")
        lines2 = _strip_timestamp(f"{out2}_{suffix}.csv")
        assert lines1 == lines2


def test_tradeoff_monotone_costs(tmp_path):
    out = tmp_path / "c"
    rc = main(["tradeoff", "--n", "30", "--diag", "6", "--trials", "500",
               "--seed", "5", "--eta-grid", "1,4,8", "--rr-lambda-grid", "0.1",
               "--rr-min-iters-grid", "0", "--output", str(out)])
    assert rc == 0
    rows = [l for l in open(f"{out}_as.csv") if not l.startswith("#")][1:]
    costs = [float(r.split(",")[2]) for r in rows]
    assert costs == sorted(costs)


def test_tradeoff_single_trial_warns(tmp_path):
    out = tmp_path / "w"
    rc = main(["tradeoff", "--n", "20", "--diag", "6", "--trials", "1",
               "--seed", "2", "--eta-grid", "2", "--rr-lambda-grid", "0.1",
               "--rr-min-iters-grid", "0", "--output", str(out)])
    assert rc == 0
    head = open(f"{out}_as.csv").read()
    assert "warning" in head


def test_oracle_check(tmp_path):
    out = tmp_path / "oracle.csv"
    rc = main(["oracle-check", "--n", "6", "--restarts", "6", "--seed", "3",
               "--output", str(out)])
    assert rc == 0
    content = open(out).read()
    assert "diminishing" in content and "adversarial" in content
    assert "FAIL" not in content


def test_gp_train_zero_steps_header_only(tmp_path):
    out = tmp_path / "gp"
    rc = main(["gp-train", "--steps", "0", "--gp-n", "20", "--output", str(out),
               "--solvers", "cholesky"])
    assert rc == 0
    lines = [l for l in open(f"{out}_cholesky.csv") if not l.startswith("#")]
    assert lines == ["step,loss,log_gamma,log_l,log_sigma2,avg_solver_iters\n"]


def test_gp_train_runs_and_is_deterministic(tmp_path):
    args = ["gp-train", "--steps", "3", "--gp-n", "20", "--probes", "6",
            "--seed", "11", "--solvers", "as:6.0"]
    out1, out2 = tmp_path / "g1", tmp_path / "g2"
    assert main(args + ["--output", str(out1)]) == 0
    assert main(args + ["--output", str(out2)]) == 0
    assert _strip_timestamp(f"{out1}_as6.csv") == _strip_timestamp(f"{out2}_as6.csv")


def test_calibrate_cost(tmp_path, capsys):
    rc = main(["calibrate-cost", "--n", "40", "--diag", "8", "--seed", "2",
               "--target-iters", "10"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "eta for average cost" in out


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("n = 24\ndiag = 6.0\ntrials = 300\nseed = 9\n"
                   "eta-grid = 2,4\nrr-lambda-grid = 0.1\nrr-min-iters-grid = 0\n")
    out = tmp_path / "t"
    rc = main(["--config", str(cfg), "tradeoff", "--trials", "200",
               "--output", str(out)])
    assert rc == 0
    head = open(f"{out}_as.csv").read()
    assert "# trials = 200" in head  # flag beat config
    assert "# n = 24" in head


def test_parse_config_rejects_garbage(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this is not a key value line\n")
    with pytest.raises(ValueError):
        parse_config_file(cfg)


def test_validation_error_exit_code():
    assert main(["calibrate-cost", "--n", "20"]) == 1  # missing target-iters
    assert main(["no-such-command"]) == 1


def test_bad_matrix_path_exit_code():
    assert main(["solve", "--matrix", "/nonexistent/m.mtx"]) == 1
