import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simocp.cli import ENV_OUTPUT, main, read_csv, write_csv


def run(tmp_path, command, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return main([command, str(path), *extra])


def base(tmp_path, **kw):
    return {"benchmark": "mmh-ocp", "epsilon": 1e-2, "output_dir": str(tmp_path / "out"), **kw}


def test_simulate_writes_fixed_grid(tmp_path):
    assert run(tmp_path, "simulate", base(tmp_path)) == 0
    header, rows = read_csv(tmp_path / "out" / "trajectory.csv")
    assert header == ["t", "zs1", "zf1", "u1"]
    assert len(rows) == 201
    assert rows[0] == [0.0, 1.0, 0.5, 0.0]
    assert rows[-1][0] == 5.0


def test_simulate_zero_horizon(tmp_path):
    assert run(tmp_path, "simulate", base(tmp_path, horizon=0)) == 0
    _, rows = read_csv(tmp_path / "out" / "trajectory.csv")
    assert rows == [[0.0, 1.0, 0.5, 0.0]]


def test_simulate_piecewise_schedule(tmp_path):
    ctrl = {"breakpoints": [0.0, 2.5, 5.0], "values": [[0.0], [4.0]]}
    assert run(tmp_path, "simulate", base(tmp_path, control=ctrl)) == 0
    _, rows = read_csv(tmp_path / "out" / "trajectory.csv")
    u = np.array(rows)[:, 3]
    t = np.array(rows)[:, 0]
    assert np.all(u[t < 2.5] == 0.0) and np.all(u[t >= 2.5] == 4.0)


@pytest.mark.parametrize("patch, field", [
    ({"epsilon": -1}, "epsilon"),
    ({"epsilon": 0}, "epsilon"),
    ({"foo": 1}, "foo"),
    ({"manifold": {"method": "zdp", "order": 1}}, "order"),
    ({"N": 0}, "N"),
    ({"control": [11.0]}, "control"),
    ({"benchmark": "nope"}, "benchmark"),
])
def test_config_errors_name_the_field(tmp_path, capsys, patch, field):
    assert run(tmp_path, "simulate", base(tmp_path, **patch)) == 2
    assert field in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["simulate", str(tmp_path / "bad.json")]) == 2
    assert main(["simulate", str(tmp_path / "missing.json")]) == 2


def test_manifold_table_matches_qssa(tmp_path):
    cfg = base(tmp_path, zs_grid={"start": 0.0, "stop": 2.0, "num": 50})
    assert run(tmp_path, "manifold", cfg) == 0
    header, rows = read_csv(tmp_path / "out" / "manifold.csv")
    assert header == ["zs1", "zf1", "residual", "method", "status"]
    zs = np.array([r[0] for r in rows])
    zf = np.array([r[1] for r in rows])
    assert len(rows) == 50
    np.testing.assert_allclose(zf, zs / (1 + zs), atol=1e-9, rtol=0)
    assert {r[3] for r in rows} == {"zdp(m=0)"} and {r[4] for r in rows} == {"ok"}


def test_manifold_empty_grid(tmp_path):
    assert run(tmp_path, "manifold", base(tmp_path, zs_grid=[])) == 0
    assert (tmp_path / "out" / "manifold.csv").read_text() == "zs1,zf1,residual,method,status\n"


def test_manifold_fold_is_flagged(tmp_path, capsys):
    cfg = {"system": {"a": [[-1, 0], [1, 0]]}, "zs_grid": [0.5, 1.0],
           "output_dir": str(tmp_path / "out")}
    assert run(tmp_path, "manifold", cfg) == 0
    _, rows = read_csv(tmp_path / "out" / "manifold.csv")
    assert [r[-1] for r in rows] == ["fold", "fold"]
    assert np.isnan(rows[0][1])
    assert "2 manifold point(s)" in capsys.readouterr().err


def test_solve_lifted_report(tmp_path):
    assert run(tmp_path, "solve", base(tmp_path, formulation="lifted")) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["status"] == "converged"
    assert 0.0 <= rep["u_min"] and rep["u_max"] <= 10.0
    assert rep["integrator_stats"]["implicit_steps"] == 0
    assert set(rep["timing"]) == {"transcription", "nlp", "reconstruction", "total"}
    assert rep["node_residual_max"] <= 1e-8


def test_solve_nonconvergent_exits_3(tmp_path, capsys):
    cfg = base(tmp_path, formulation="full", N=1, nlp={"tol": 1e-14, "max_iters": 1})
    assert run(tmp_path, "solve", cfg, "--init", "zero") == 3
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["status"] != "converged"
    assert "status" in capsys.readouterr().err


def test_compare_outputs_and_determinism(tmp_path):
    cfg = base(tmp_path, formulations=["lifted", "reduced"], N=8)
    assert run(tmp_path, "compare", cfg) == 0
    first = {p: (tmp_path / "out" / p).read_bytes() for p in ("compare.csv", "compare.json")}
    assert run(tmp_path, "compare", cfg) == 0
    assert (tmp_path / "out" / "compare.csv").read_bytes() == first["compare.csv"]
    a = json.loads(first["compare.json"])
    b = json.loads((tmp_path / "out" / "compare.json").read_text())
    a.pop("timing"), b.pop("timing")
    assert a == b
    header, rows = read_csv(tmp_path / "out" / "compare.csv")
    assert header == ["t", "zs1_lifted", "zf1_lifted", "u1_lifted",
                      "zs1_reduced", "zf1_reduced", "u1_reduced"]
    assert len(rows) == 201
    assert set(a["pairs"]["lifted/reduced"]) >= {"zs_inf", "zf_inf", "u_inf", "objective_rel"}


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = base(tmp_path, horizon=0)
    monkeypatch.setenv(ENV_OUTPUT, str(tmp_path / "env"))
    assert run(tmp_path, "simulate", cfg) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()
    assert run(tmp_path, "simulate", cfg, "--output-dir", str(tmp_path / "flag")) == 0
    assert (tmp_path / "flag" / "trajectory.csv").exists()


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=8))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "v.csv"
    write_csv(path, ["x"], [[v] for v in values])
    _, rows = read_csv(path)
    assert [r[0] for r in rows] == values
    assert all(np.float64(r[0]).tobytes() == np.float64(v).tobytes() for r, v in zip(rows, values))
