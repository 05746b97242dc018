import json

import pytest

from obstacle_fem.cli import ConfigError, load_config, main, parse_config
from obstacle_fem.output import read_csv


def write_cfg(tmp_path, name="cfg.json", **cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def run(tmp_path, command, out="out", **cfg):
    path = write_cfg(tmp_path, **cfg)
    return main([command, "--config", str(path), "--out", str(tmp_path / out)]), tmp_path / out


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = parse_config({})
    assert cfg.method == "stabilized" and cfg.degree == 1 and cfg.alpha == 0.01
    assert cfg.mesh["initial_h"] == 0.5 and cfg.solver["tol"] == 1e-10


def test_default_alpha_for_p2():
    assert parse_config({"degree": 2}).alpha == 0.1


def test_mixed_ignores_alpha():
    assert parse_config({"method": "mixed", "alpha": 0.3}).alpha is None


@pytest.mark.parametrize(
    "raw,field",
    [
        ({"method": "penalty"}, "method"),
        ({"degree": 3}, "degree"),
        ({"degree": "two"}, "degree"),
        ({"alpha": -1.0}, "alpha"),
        ({"mesh": {"initial_h": 0}}, "mesh.initial_h"),
        ({"mesh": {"levels": 0}}, "mesh.levels"),
        ({"mesh": {"family": "square"}}, "mesh.family"),
        ({"mesh": {"spacing": 1}}, "mesh.spacing"),
        ({"solver": {"tol": -1}}, "solver.tol"),
        ({"solver": {"linear": "gmres"}}, "solver.linear"),
        ({"theta": 1.5}, "theta"),
        ({"max_dofs": 2.5}, "max_dofs"),
        ({"colour": "red"}, "colour"),
    ],
)
def test_invalid_fields_are_named(raw, field):
    with pytest.raises(ConfigError, match=f"'{field}'"):
        parse_config(raw)


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "method": "mixed",\n  "degree": }\n')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_invalid_method_exit_code(tmp_path):
    code, _ = run(tmp_path, "solve", method="penalty")
    assert code == 1


# -------------------------------------------------------------- commands


def test_solve_writes_outputs(tmp_path):
    code, out = run(tmp_path, "solve", mesh={"initial_h": 1.0})
    assert code == 0
    for name in ("u.vtk", "lambda.vtk", "table.csv", "report.json"):
        assert (out / name).is_file()
    rows = read_csv(out / "table.csv")
    assert len(rows) == 1 and rows[0]["err_u_h1"] > 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["levels"][0]["converged"] is True
    assert "E_K" in (out / "lambda.vtk").read_text()


def test_rerun_byte_identical(tmp_path):
    cfg = {"mesh": {"initial_h": 1.0, "levels": 2}}
    _, a = run(tmp_path, "solve", out="a", **cfg)
    _, b = run(tmp_path, "solve", out="b", **cfg)
    for name in ("u.vtk", "lambda.vtk", "table.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    p = write_cfg(tmp_path, mesh={"initial_h": 1.0})
    assert main(["solve", "--config", str(p)]) == 0
    dirs = [d.name for d in tmp_path.iterdir() if d.is_dir()]
    assert len(dirs) == 1 and dirs[0].startswith("obstacle-solve-")


def test_converge_table(tmp_path):
    code, out = run(tmp_path, "converge", mesh={"initial_h": 1.0, "levels": 3})
    assert code == 0
    rows = read_csv(out / "table.csv")
    assert [r["level"] for r in rows] == [0, 1, 2]
    assert rows[2]["err_u_h1"] < rows[0]["err_u_h1"]
    assert (out / "plot.gp").is_file() and (out / "u_L2.vtk").is_file()


def test_converge_conforming_ring_column(tmp_path):
    code, out = run(tmp_path, "converge", mesh={"family": "conforming", "initial_h": 0.5, "levels": 2})
    assert code == 0
    rows = read_csv(out / "table.csv")
    assert rows[0]["conform_ring_vertices"] > 0
    assert rows[1]["conform_ring_vertices"] == 2 * rows[0]["conform_ring_vertices"]


def test_adapt_budget_below_initial(tmp_path):
    code, out = run(tmp_path, "adapt", mesh={"initial_h": 1.0}, max_dofs=5)
    assert code == 0
    assert len(read_csv(out / "table.csv")) == 1


def test_adapt_requires_stabilized(tmp_path):
    code, _ = run(tmp_path, "adapt", method="mixed")
    assert code == 1


def test_nonconvergence_exit_code(tmp_path):
    code, out = run(tmp_path, "solve", mesh={"initial_h": 1.0}, solver={"max_iter": 1})
    assert code == 2
    assert json.loads((out / "report.json").read_text())["levels"][0]["converged"] is False


def test_check_default_passes(tmp_path, capsys):
    code, out = run(tmp_path, "check")
    assert code == 0
    text = capsys.readouterr().out
    assert "[ok] quadrature order 6" in text and "[ok] KKT complementarity" in text
    assert json.loads((out / "check.json").read_text())["passed"] is True


def test_check_large_alpha_warns(tmp_path, capsys):
    code, _ = run(tmp_path, "check", degree=2, alpha=1e3, mesh={"initial_h": 1.0}, solver={"linear": "direct", "max_iter": 10})
    text = capsys.readouterr().out
    assert "[WARN] alpha range" in text
    assert code in (0, 3)


def test_check_mixed_reports_infsup(tmp_path, capsys):
    code, out = run(tmp_path, "check", method="mixed", mesh={"initial_h": 1.0})
    assert code == 0
    checks = {c["check"]: c for c in json.loads((out / "check.json").read_text())["checks"]}
    assert checks["inf-sup constant (bubble pair)"]["ok"]
    assert checks["inf-sup constant (no bubbles)"]["severity"] == "info"
    assert "[ok] inf-sup constant (bubble pair)" in capsys.readouterr().out
