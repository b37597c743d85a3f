import math

import numpy as np
import pytest

from anisofem.fem import SolverError, mass_matrix, solve_poisson
from anisofem.mesh import build_cube_macros, build_mesh
from anisofem.ocp import (OCP_CSV_HEADER, OCPConfig, control_l2_sq, control_load, ocp_convergence,
                          projection_residual, solve_ocp)
from anisofem.quadrature import tet_rule


@pytest.fixture(scope="module")
def cube4():
    return build_mesh(build_cube_macros(), 4)


@pytest.fixture(scope="module")
def cube_solution(cube4):
    return solve_ocp(cube4, OCPConfig(), tol=1e-9)


def reduced_objective(mesh, p, config):
    """J of the control clamp(-p/alpha), computed from scratch with yd = 1."""
    from anisofem.fem import assemble, solve

    system = assemble(mesh, None)
    system.load = control_load(mesh, p, config)
    y = solve(system, 1e-13).u
    m = mass_matrix(mesh)
    one = np.ones(mesh.n_nodes)
    track = y @ (m @ y) - 2 * y @ (m @ one) + one @ (m @ one)
    return 0.5 * track + 0.5 * config.alpha * control_l2_sq(mesh, p, config)


@pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(alpha=-1.0), dict(alpha=math.inf),
                                    dict(ua=1.0, ub=0.0), dict(ua=math.nan)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        OCPConfig(**kwargs)


def test_equal_bounds_fix_the_control(cube4):
    c = 0.3
    sol = solve_ocp(cube4, OCPConfig(ua=c, ub=c), tol=1e-10)
    assert sol.iterations == 1
    np.testing.assert_array_equal(sol.u_at_nodes(), c)
    _, ref = solve_poisson(cube4, lambda x: np.full(len(x), c), tol=1e-12)
    assert np.max(np.abs(sol.y - ref.u)) < 1e-9


def test_control_shrinks_with_alpha(cube4):
    norms = [math.sqrt(control_l2_sq(cube4, solve_ocp(cube4, OCPConfig(a, -math.inf, math.inf)).p,
                                     OCPConfig(a, -math.inf, math.inf)))
             for a in (1.0, 10.0, 100.0)]
    assert norms[0] > norms[1] > norms[2] > 0


def test_projection_and_monotone_objective(cube4, cube_solution):
    assert projection_residual(cube4, cube_solution) < 1e-14
    obj = np.array(cube_solution.objective)
    assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[:-1]))
    assert cube_solution.residual <= 1e-9


def test_variational_inequality(cube4, cube_solution, rng):
    cfg = cube_solution.config
    rule = tet_rule(4)
    tets = cube4.tets
    vol = np.abs(np.linalg.det(cube4.nodes[tets[:, 1:]] - cube4.nodes[tets[:, :1]])) / 6
    p_q = cube_solution.p[tets] @ rule.points.T
    u_q = cfg.project(p_q)
    grad = cfg.alpha * u_q + p_q  # reduced gradient at the quadrature points
    v_nodes = rng.uniform(cfg.ua, cfg.ub, size=(1000, cube4.n_nodes))
    v_q = v_nodes[:, tets] @ rule.points.T
    vi = np.einsum("t,stq,q->s", vol, grad * (v_q - u_q), rule.weights)
    assert vi.min() >= -1e-9


def test_optimal_control_beats_perturbations(cube4, cube_solution, rng):
    cfg = cube_solution.config
    j_opt = reduced_objective(cube4, cube_solution.p, cfg)
    scale = np.max(np.abs(cube_solution.p))
    for eps in (1e-1, 1e-2):
        for _ in range(5):
            cand = cube_solution.p + eps * scale * rng.standard_normal(cube4.n_nodes)
            assert reduced_objective(cube4, cand, cfg) >= j_opt - 1e-10


def test_iteration_cap_raises(cube4):
    with pytest.raises(SolverError):
        solve_ocp(cube4, OCPConfig(), tol=1e-14, max_iter=1)


def test_cube_convergence_second_order():
    report = ocp_convergence((4, 8, 16), OCPConfig(), build_cube_macros())
    for attr in ("err_u", "err_y", "err_p"):
        assert 1.75 <= report.pairwise(attr)[-1] <= 2.25
    lines = report.csv_text().splitlines()
    assert all(r.projection < 1e-14 for r in report.levels)
    assert lines[0] == OCP_CSV_HEADER and len(lines) == 4
    assert lines[1].split(",")[6:9] == ["", "", ""]
    assert all(len(f.split(".")[1]) == 2 for f in lines[2].split(",")[6:9])
