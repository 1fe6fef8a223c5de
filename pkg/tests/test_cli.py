import json

import numpy as np
import pytest

from posadapt.cli import main
from posadapt.problem import load_problem
from posadapt.ssp import convert, example_instance

from conftest import P_STAR


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


@pytest.mark.parametrize("method", ["vi", "lp"])
def test_solve_prints_known_values(capsys, method):
    code, out = run(capsys, "solve", "--method", method)
    assert code == 0
    d = json.loads(out.out)
    np.testing.assert_allclose(d["p"], P_STAR, atol=1e-9)
    assert d["gain"] == [0, 2, 0]
    assert d["assumptions"]["assumption1"] and d["assumptions"]["assumption2"]


def test_convert_round_trip(capsys, tmp_path):
    out = tmp_path / "p.json"
    code, _ = run(capsys, "convert", "--out", str(out))
    assert code == 0
    P, ref = load_problem(out), convert(example_instance())
    for name in ("A", "B", "E", "s", "r"):
        np.testing.assert_array_equal(getattr(P, name), getattr(ref, name))
    assert P.partition == ref.partition


def test_config_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "solve", "--instance", str(tmp_path / "missing.json"))[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"episodes": -1}))
    assert run(capsys, "benchmark", "--config", str(bad))[0] == 2


def test_numerical_failure_exits_3(capsys, tmp_path):
    # no inputs and an unstable state: the value is infinite
    prob = {"A": [[2.0]], "B": [[]], "E": [[1.0]], "s": [1.0], "r": [], "partition": [0]}
    path = tmp_path / "unstable.json"
    path.write_text(json.dumps(prob))
    code, out = run(capsys, "solve", "--instance", str(path))
    assert code == 3
    assert "numerical" in out.err


def test_benchmark_and_certify(capsys, tmp_path):
    code, out = run(capsys, "benchmark", "--out-dir", str(tmp_path / "b"), "--runs", "2",
                    "--episodes", "12", "--certify")
    assert code == 0
    d = json.loads(out.out)
    assert d["certification"]["ok"]
    header = (tmp_path / "b" / "regret.csv").read_text().splitlines()[0]
    assert header.split(",")[:4] == ["episode", "mean_adaptive", "ci_lo_adaptive",
                                     "ci_hi_adaptive"]

    code, out = run(capsys, "simulate", "--out-dir", str(tmp_path / "s"), "--episodes", "15",
                    "--algorithm", "adaptive")
    assert code == 0
    traj = tmp_path / "s" / "trajectory.csv"
    assert traj.exists()
    code, out = run(capsys, "certify", "--trajectory", str(traj))
    assert code == 0
    d = json.loads(out.out)
    assert d["theorem1_violations"] == 0 and d["steps"] > 0


def excited_trajectory(capsys, out_dir, episodes=60):
    """Noise-free run with heavy constant exploration, so the estimate converges."""
    cfg = {"disturbance": {"kind": "none"}, "algorithms": ["adaptive"],
           "controller": {"eps0": 0.5, "alpha": 1.0}}
    path = out_dir / "cfg.json"
    path.write_text(json.dumps(cfg))
    code, _ = run(capsys, "simulate", "--config", str(path), "--out-dir", str(out_dir),
                  "--episodes", str(episodes))
    assert code == 0
    return out_dir / "trajectory.csv"


def test_certify_checks_excited_trajectory(capsys, tmp_path):
    traj = excited_trajectory(capsys, tmp_path)
    code, out = run(capsys, "certify", "--trajectory", str(traj))
    d = json.loads(out.out)
    assert code == 0 and d["ok"]
    assert d["steps_checked"] > 0 and d["windows_checked"] > 0


def test_certify_exit_code_reports_violations(capsys, tmp_path, monkeypatch):
    traj = excited_trajectory(capsys, tmp_path)
    from posadapt import harness
    monkeypatch.setattr(harness.cert, "theorem1_bounds", lambda *a, **k: (False, {}))
    code, out = run(capsys, "certify", "--trajectory", str(traj))
    d = json.loads(out.out)
    assert code == 1 and not d["ok"] and d["theorem1_violations"] > 0
