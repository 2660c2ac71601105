import io
import json

import numpy as np
import pytest

from dyadic_lab import cli


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_oracle_stationary_example():
    code, out, _ = run(["oracle", "stationary", "--lambda", "2", "--sigma", "1", "--n", "2"])
    assert code == 0
    assert out.split() == ["0.33333333333333331", "0.083333333333333329"]


@pytest.mark.parametrize("argv, expected", [
    (["oracle", "pi", "--lambda", "2", "--i", "3", "--j", "1"], 15 / 16),
    (["oracle", "occupation", "--lambda", "2", "--i", "2", "--j", "1"], 1 / 12),
    (["oracle", "survival-bound", "--lambda", "2", "--t", "1"], 0.22696586297081505),
])
def test_oracle_values(argv, expected):
    code, out, _ = run(argv)
    assert code == 0
    assert float(out.split()[0]) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("argv, code", [
    (["oracle", "stationary", "--sigma", "1"], cli.EXIT_USAGE),
    (["oracle", "stationary", "--lambda", "0.5"], cli.EXIT_USAGE),
    (["solve-moments", "--lambda", "2", "--n-modes", "600"], cli.EXIT_RANGE),
    (["solve-moments", "--lambda", "2", "--u0", "nonsense"], cli.EXIT_USAGE),
    (["no-such-command"], cli.EXIT_USAGE),
    ([], cli.EXIT_USAGE),
])
def test_exit_codes(argv, code):
    assert run(argv)[0] == code


def test_version_flag(capsys):
    assert cli.main(["--version"]) == 0
    assert "0.1.0" in capsys.readouterr().out


def test_parse_vector_forms():
    from dyadic_lab.model import ModelParams
    p = ModelParams(2.0, 1.0)
    np.testing.assert_array_equal(cli.parse_vector("e2", 3, p), [0, 1, 0])
    np.testing.assert_array_equal(cli.parse_vector("zero", 3, p), [0, 0, 0])
    np.testing.assert_allclose(cli.parse_vector("geom:1:0.5", 3, p), [0.5, 0.25, 0.125])
    np.testing.assert_array_equal(cli.parse_vector("1,2,3", 3, p), [1, 2, 3])
    np.testing.assert_allclose(cli.parse_vector("stationary", 2, p), [1 / 3, 1 / 12])
    with pytest.raises(cli.UsageError):
        cli.parse_vector("e9", 3, p)
    np.testing.assert_array_equal(cli.parse_vector("1,2", 3, p), [1, 2, 0])
    with pytest.raises(cli.UsageError):
        cli.parse_vector("1,2,3,4", 3, p)


def test_solve_moments_outputs_and_manifest_round_trip(tmp_path):
    first = tmp_path / "a"
    argv = ["solve-moments", "--lambda", "2", "--n-modes", "6", "--boundary", "absorbing", "--u0", "e1",
            "--t-final", "0.25", "--checkpoints", "5", "--out", str(first)]
    assert run(argv)[0] == 0
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["command"] == "solve-moments"
    table = (first / "moments.csv").read_text().splitlines()
    assert table[0] == "time,n,u_n" and len(table) == 1 + 6 * 6
    second = tmp_path / "b"
    assert run(["solve-moments", "--config", str(first / "manifest.json"), "--out", str(second)])[0] == 0
    assert (first / "moments.csv").read_bytes() == (second / "moments.csv").read_bytes()
    assert json.loads((second / "manifest.json").read_text())["files"] == manifest["files"]


def test_explicit_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lam": 2.0, "n": 2, "sigma": 1.0}))
    code, out, _ = run(["oracle", "stationary", "--config", str(cfg), "--sigma", "2"])
    assert code == 0
    assert float(out.split()[0]) == pytest.approx(4 / 3)


def test_simulate_sde_json(tmp_path):
    argv = ["simulate-sde", "--lambda", "2", "--sigma", "1", "--n-modes", "6", "--paths", "20",
            "--t-final", "0.05", "--dt", "0.01", "--x0", "zero", "--out", str(tmp_path), "--format", "json"]
    code, out, _ = run(argv)
    assert code == 0
    payload = json.loads((tmp_path / "ensemble.json").read_text())
    assert payload["records"] and {"time", "n"} <= set(payload["records"][0])
    assert list(payload["records"][0]) == payload["columns"]
    again = tmp_path / "again"
    run(argv[:-4] + ["--out", str(again), "--format", "json"])
    assert (tmp_path / "ensemble.json").read_bytes() == (again / "ensemble.json").read_bytes()


def test_simulate_sde_guard_is_range_error(tmp_path):
    argv = ["simulate-sde", "--lambda", "2", "--n-modes", "10", "--scheme", "ito_splitting", "--dt", "0.01",
            "--t-final", "0.1", "--paths", "4", "--out", str(tmp_path)]
    assert run(argv)[0] == cli.EXIT_RANGE


def test_simulate_chain(tmp_path):
    code, out, _ = run(["simulate-chain", "--lambda", "2", "--paths", "500", "--horizon", "1",
                        "--times", "4", "--out", str(tmp_path)])
    assert code == 0
    assert {"occupation.csv", "survival.csv", "manifest.json"} <= {p.name for p in tmp_path.iterdir()}


def test_verify_oracles_passes(tmp_path):
    code, out, _ = run(["verify", "oracles", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    assert "FAIL" not in out


def test_verify_reports_failure_with_exit_one(tmp_path):
    code, out, _ = run(["verify", "invariant", "--out", str(tmp_path)])
    assert code == cli.EXIT_FAILED
    assert "FAIL" in out


def test_unwritable_output_is_usage_error(tmp_path):
    target = tmp_path / "file"
    target.write_text("x")
    argv = ["solve-moments", "--lambda", "2", "--out", str(target / "sub")]
    assert run(argv)[0] == cli.EXIT_USAGE
