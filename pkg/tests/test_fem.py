import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix

from anisofem.fem import (DivergenceError, PointLocator, SolverError, SparseSystem, WeightedNormSpec, assemble,
                          boundary_nodes, eoc, error_norms, fe_norms, fitted_order, mass_matrix, red_refine,
                          residual_estimate, solve, solve_poisson, stiffness_matrix, weighted_norm)
from anisofem.functions import ModelFunction, affine, edge_singular
from anisofem.mesh import Macroelement, MacroKind, build_cube_macros, build_mesh
from anisofem.quadrature import tet_volumes

TYPE3 = Macroelement(np.array([[0, 0, 0], [0, 0, 1.0], [1, 0, 0], [0, 1, 0]]), MacroKind.TYPE3, mu=0.5,
                     lambda_e=2 / 3)


def bubble():
    def value(x):
        return np.prod(x * (1 - x), axis=1)

    def grad(x):
        p = x * (1 - x)
        d = 1 - 2 * x
        return np.column_stack([d[:, 0] * p[:, 1] * p[:, 2], p[:, 0] * d[:, 1] * p[:, 2],
                                p[:, 0] * p[:, 1] * d[:, 2]])

    def source(x):
        p = x * (1 - x)
        return 2 * (p[:, 1] * p[:, 2] + p[:, 0] * p[:, 2] + p[:, 0] * p[:, 1])

    return ModelFunction(value, grad), source


@pytest.fixture(scope="module")
def cube_meshes():
    return {n: build_mesh(build_cube_macros(), n) for n in (2, 4, 8, 16)}


def test_stiffness_kernel_and_symmetry(cube_meshes):
    k = stiffness_matrix(cube_meshes[4])
    assert np.max(np.abs(k @ np.ones(k.shape[0]))) < 1e-13
    assert abs(k - k.T).max() < 1e-15


def test_single_tet_row_sums():
    mesh = build_mesh(build_cube_macros()[:1], 1)
    k = stiffness_matrix(mesh).toarray()
    np.testing.assert_allclose(k.sum(axis=1), 0.0, atol=1e-15)


def test_mass_matrix_total(cube_meshes):
    m = mass_matrix(cube_meshes[4])
    assert m.sum() == pytest.approx(1.0, rel=1e-13)


def test_zero_source_gives_zero(cube_meshes):
    system, sol = solve_poisson(cube_meshes[4], lambda x: np.zeros(len(x)))
    assert np.all(system.load == 0) and np.all(sol.u == 0) and sol.iterations == 0


def test_patch_test_with_linear_data(cube_meshes):
    lin = affine(0.5, [1.0, -2.0, 3.0])
    mesh = cube_meshes[4]
    system = assemble(mesh, None, dirichlet=lin)
    sol = solve(system, tol=1e-13)
    assert np.max(np.abs(sol.u - lin(mesh.nodes))) <= 1e-9


def test_residual_and_galerkin_orthogonality(cube_meshes):
    _, src = bubble()
    system, sol = solve_poisson(cube_meshes[8], src, tol=1e-10)
    a, rhs = system.reduced()
    res = np.linalg.norm(rhs - a @ sol.u[system.free])
    assert res <= 1e-10 * np.linalg.norm(rhs)
    assert sol.residual <= 1e-10
    assert np.all(sol.u[boundary_nodes(cube_meshes[8])] == 0)


def test_identity_like_system():
    system = SparseSystem(csr_matrix(np.diag([2.0, 3.0])), np.array([4.0, 9.0]), np.zeros(2, bool), np.zeros(2))
    sol = solve(system, tol=1e-12)
    np.testing.assert_allclose(sol.u, [2.0, 3.0], rtol=1e-14)
    assert sol.iterations == 1


def test_iteration_cap_raises(cube_meshes):
    _, src = bubble()
    system = assemble(cube_meshes[8], src)
    with pytest.raises(SolverError, match="residual"):
        solve(system, tol=1e-12, maxiter=2)


def test_manufactured_cube_orders(cube_meshes):
    exact, src = bubble()
    h1, l2 = [], []
    for n in (4, 8, 16):
        _, sol = solve_poisson(cube_meshes[n], src, tol=1e-11)
        e = error_norms(cube_meshes[n], sol.u, exact)
        h1.append(e[0])
        l2.append(e[1])
    hs = [1 / 4, 1 / 8, 1 / 16]
    assert fitted_order(h1, hs) == pytest.approx(1.0, abs=0.1)
    assert eoc(l2, hs)[-1] == pytest.approx(2.0, abs=0.2)


def test_error_norms_trivial(cube_meshes):
    mesh = cube_meshes[4]
    lin = affine(1.0, [0.3, 0.2, -0.1])
    assert error_norms(mesh, lin(mesh.nodes), lin) == pytest.approx((0.0, 0.0), abs=1e-13)
    one = affine(1.0, [0.0, 0.0, 0.0])
    assert error_norms(mesh, np.zeros(mesh.n_nodes), one) == pytest.approx((0.0, 1.0), abs=1e-13)
    u = lin(mesh.nodes)
    assert error_norms(mesh, u, (cube_meshes[8], lin(cube_meshes[8].nodes))) == pytest.approx((0, 0), abs=1e-12)
    semi, l2 = fe_norms(mesh, u)
    assert semi == pytest.approx(math.sqrt(0.14), rel=1e-12)


def test_point_locator(cube_meshes, rng):
    mesh = cube_meshes[4]
    loc = PointLocator(mesh)
    x = rng.uniform(0, 1, size=(500, 3))
    t, b = loc.locate(x)
    assert np.all(b >= -1e-9)
    np.testing.assert_allclose(np.einsum("pk,pkd->pd", b, mesh.nodes[mesh.tets[t]]), x, atol=1e-12)
    with pytest.raises(ValueError):
        loc.locate(np.array([[2.0, 2.0, 2.0]]))


def test_estimator_zero_for_exact_solution():
    mesh = build_mesh(build_cube_macros()[:1], 1)
    est = residual_estimate(mesh, np.zeros(mesh.n_nodes), lambda x: np.zeros(len(x)))
    assert est.total == 0.0


def test_estimator_decreases_and_tracks_error(fichera_levels):
    from anisofem.functions import fichera_source

    origin = np.zeros((1, 3))
    ests, sols = [], {}
    for n in (2, 4, 8):
        mesh = fichera_levels[n].mesh
        _, sol = solve_poisson(mesh, fichera_source, singular_points=origin)
        sols[n] = sol.u
        ests.append(residual_estimate(mesh, sol.u, fichera_source, singular_points=origin).total)
    assert ests[0] > ests[1] > ests[2]
    errs = [error_norms(fichera_levels[n].mesh, sols[n], (fichera_levels[2 * n].mesh, sols[2 * n]))[0]
            for n in (2, 4)]
    eff = [ests[0] / errs[0], ests[1] / errs[1]]
    assert max(eff) / min(eff) < 1.5


def test_red_refine_preserves_volume(rng):
    v = rng.normal(size=(3, 4, 3))
    kids = red_refine(v)
    assert kids.shape == (24, 4, 3)
    np.testing.assert_allclose(np.abs(tet_volumes(kids)).reshape(3, 8).sum(1), np.abs(tet_volumes(v)), rtol=1e-12)


def test_weighted_norm_constant():
    one = affine(1.0, [0, 0, 0])
    val = weighted_norm(one, TYPE3, WeightedNormSpec(0, 0.0, 0.0), depth=4)
    assert val == pytest.approx(math.sqrt(TYPE3.volume), rel=1e-12)


def test_weighted_norm_k0_is_l2():
    f = ModelFunction(lambda x: np.exp(x[:, 0]) * (1 + x[:, 2]), lambda x: None)
    val = weighted_norm(f, TYPE3, WeightedNormSpec(0, 0.0, 0.0), depth=6)
    # oracle: Gauss product rule in collapsed coordinates
    from anisofem.quadrature import conical_tet_rule

    rule = conical_tet_rule(20)
    x = rule.points @ TYPE3.vertices
    ref = math.sqrt(TYPE3.volume * (rule.weights @ f.value(x) ** 2))
    assert val == pytest.approx(ref, rel=1e-10)


def test_weighted_norm_edge_singularity_threshold():
    # |D^2 r^(2/3)|^2 r^(2 delta) ~ r^(2 delta - 8/3) is integrable in 2D iff delta > 1/3
    f = edge_singular(2 / 3, TYPE3.local_frame(), radius=5.0, slope=0.0)
    assert math.isfinite(weighted_norm(f, TYPE3, WeightedNormSpec(2, 0.4, 0.4), depth=10))
    with pytest.raises(DivergenceError):
        weighted_norm(f, TYPE3, WeightedNormSpec(2, 0.2, 0.2), depth=10)


def test_orders():
    hs = np.array([1 / 4, 1 / 8, 1 / 16])
    np.testing.assert_allclose(eoc(hs**2, hs), [2.0, 2.0])
    assert fitted_order(3 * hs**1.5, hs) == pytest.approx(1.5)


def test_convergence_report_keeps_reference_levels():
    from anisofem.convergence import RunConfig, run_convergence, stability_slopes

    report = run_convergence(RunConfig(levels=(2, 4)))
    assert [r.n for r in report.levels] == [2, 4]
    assert [r.n for r in report.solved] == [2, 4, 8]
    ratios, pairwise, fitted = stability_slopes(report.solved)
    assert np.all(ratios > 0) and len(pairwise) == 2
    assert pairwise[-1] == pytest.approx(np.log(ratios[1] / ratios[2]) / np.log(2.0))
    assert min(pairwise) - 1e-12 <= fitted <= max(pairwise) + 1e-12
