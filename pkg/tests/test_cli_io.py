import hashlib
import subprocess
import sys

import numpy as np
import pytest

from anisofem.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from anisofem.io import level_vtk_path, mesh_cell_fields, vtk_text, write_csv
from anisofem.mesh import build_fichera_macros, build_mesh


@pytest.fixture(scope="module")
def mesh2():
    return build_mesh(build_fichera_macros(), 2)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_vtk_structure(mesh2):
    text = vtk_text(mesh2, {"u": np.arange(mesh2.n_nodes, dtype=float)}, mesh_cell_fields(mesh2))
    lines = text.splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert f"CELLS {mesh2.n_tets} {5 * mesh2.n_tets}" in lines
    start = lines.index(f"CELL_TYPES {mesh2.n_tets}") + 1
    assert set(lines[start:start + mesh2.n_tets]) == {"10"}
    names = [ln.split()[1] for ln in lines if ln.startswith("SCALARS")]
    assert names == ["h1", "h3", "macro_id", "u"]
    assert "SCALARS macro_id int 1" in lines


def test_vtk_rejects_wrong_length(mesh2):
    with pytest.raises(ValueError):
        vtk_text(mesh2, {"u": np.zeros(3)})


def test_mesh_command_vtk_is_byte_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["mesh", "--levels", "2,4", "--vtk", str(a)]) == EXIT_OK
    assert main(["mesh", "--levels", "2,4", "--vtk", str(b)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "n,nodes,tets,min_h1_over_h3"
    for n in (2, 4):
        fa = a / f"level_{n:03d}.vtk"
        assert _digest(fa) == _digest(b / fa.name)
        text = fa.read_text()
        assert "POINT_DATA" not in text and "CELL_DATA" in text
    assert float(out[2].split(",")[3]) < 0.2


def test_csv_is_deterministic(tmp_path):
    paths = [tmp_path / "x.csv", tmp_path / "y.csv"]
    for p in paths:
        write_csv(p, "a,b", [(1, 0.1), ("s", 1 / 3)])
    assert paths[0].read_bytes() == paths[1].read_bytes() == b"a,b\n1,0.1\ns,0.333333333333\n"
    assert level_vtk_path(tmp_path / "v", 7).endswith("level_007.vtk")


def test_convergence_csv_format(tmp_path, capsys):
    csv = tmp_path / "c.csv"
    assert main(["convergence", "--levels", "2,4", "--csv", str(csv)]) == EXIT_OK
    text = csv.read_text()
    assert capsys.readouterr().out == text
    rows = [r.split(",") for r in text.splitlines()]
    header = rows[0]
    eoc_cols = [i for i, h in enumerate(header) if h.startswith("eoc")]
    assert eoc_cols and all(rows[1][i] == "" for i in eoc_cols)
    assert all(len(rows[2][i].split(".")[1]) == 2 for i in eoc_cols)


@pytest.mark.parametrize("argv", [["bogus"], ["mesh", "--levels", "x"], ["exponent", "--level", "0"],
                                  ["mesh", "--mu", "0.4", "--nu", "0.9", "--levels", "2"],
                                  ["solve", "--mu", "0.3", "--nu", "0.5", "--levels", "2"],
                                  ["mesh", "--domain", "/nonexistent/macros.txt", "--levels", "2"],
                                  ["ocp", "--alpha", "-1", "--levels", "2"],
                                  ["ocp", "--ua", "1", "--ub", "0", "--levels", "2"],
                                  ["checks", "--cases", "9"]])
def test_configuration_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_CONFIG


def test_numerical_failure_exits_3(capsys):
    assert main(["solve", "--levels", "2", "--tol", "1e-300"]) == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "anisofem.cli", "exponent", "--patch", "halfspace",
                          "--level", "4"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.startswith("patch=halfspace mu1=")
    lam = float(res.stdout.split("lambda_v=")[1])
    assert lam == pytest.approx(1.0, abs=5e-3)


def test_mesh_quality_columns(capsys):
    assert main(["mesh", "--levels", "2", "--quality"]) == EXIT_OK
    header, row = capsys.readouterr().out.splitlines()
    assert header.endswith("max_dihedral_deg,valid")
    fields = row.split(",")
    assert fields[:3] == ["2", "138", "444"]
    assert float(fields[4]) == pytest.approx(135.0, abs=1e-9) and fields[5] == "true"
