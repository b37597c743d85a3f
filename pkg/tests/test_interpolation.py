from collections import defaultdict

import numpy as np
import pytest

from anisofem.functions import affine
from anisofem.interpolation import (NO_EDGE, apply_Dh, build_patches, dual_values, dual_weight, edge_projection,
                                    lagrange_interpolate, macro_lagrange_split, patch_overlap, select_sigma,
                                    validate_assignment, write_patch_csv, write_sigma_csv)
from anisofem.mesh import (Macroelement, MacroKind, build_cube_macros, build_fichera_macros, build_mesh,
                           classify_nodes)
from anisofem.quadrature import gauss_legendre

TYPE3 = Macroelement(np.array([[0, 0, 0], [0, 0, 1.0], [1, 0, 0], [0, 1, 0]]), MacroKind.TYPE3, mu=0.5,
                     lambda_e=2 / 3)


def x1_squared(x):
    return x[:, 0] ** 2


def midpoint_dual(f, a, b, cells=64):
    t = (np.arange(cells) + 0.5) / cells
    return np.mean(f(a + t[:, None] * (b - a)) * dual_weight(t))


def test_edge_projection_of_t_squared():
    proj = edge_projection(lambda x: x[:, 0] ** 2, [0, 0, 0], [1, 0, 0])
    assert proj(0.0) == pytest.approx(-1 / 6, abs=1e-14)
    assert proj(1.0) == pytest.approx(5 / 6, abs=1e-14)
    assert dual_values(lambda x: x[:, 0] ** 2, np.zeros((1, 3)), np.array([[1.0, 0, 0]]))[0] == pytest.approx(-1 / 6)


def test_edge_projection_reproduces_linear(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    c0, c = rng.normal(), rng.normal(size=3)
    proj = edge_projection(lambda x: c0 + x @ c, a, b)
    assert proj(0.0) == pytest.approx(c0 + a @ c, abs=1e-13)
    assert proj(1.0) == pytest.approx(c0 + b @ c, abs=1e-13)
    with pytest.raises(ValueError):
        edge_projection(lambda x: x[:, 0], a, a)


def test_dual_weight_biorthogonal_and_bounded():
    t, w = gauss_legendre(5)
    psi = dual_weight(t)
    assert w @ (psi * (1 - t)) == pytest.approx(1.0, abs=1e-14)
    assert w @ (psi * t) == pytest.approx(0.0, abs=1e-14)
    for length in (1.0, 0.01, 3.7):
        grid = np.linspace(0, 1, 1001)
        assert np.max(np.abs(dual_weight(grid, length))) * length == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_assignment_valid(fichera_levels, n):
    d = fichera_levels[n]
    assert validate_assignment(d.mesh, d.assignment) == []
    np.testing.assert_array_equal(d.assignment.other == NO_EDGE, d.classification.excluded)


def test_assignment_deterministic(fichera_levels):
    d = fichera_levels[4]
    again = select_sigma(d.mesh, classify_nodes(d.mesh))
    np.testing.assert_array_equal(again.other, d.assignment.other)


def test_dual_normalisation_on_every_assigned_edge(fichera_levels):
    mesh, asg = fichera_levels[4].mesh, fichera_levels[4].assignment
    ids = asg.assigned
    a, b = mesh.nodes[ids], mesh.nodes[asg.other[ids]]
    q = len(gauss_legendre(5)[0])
    ar, br = np.repeat(a, q, axis=0), np.repeat(b, q, axis=0)

    def param(x):
        d = br - ar
        return np.einsum("md,md->m", x - ar, d) / np.einsum("md,md->m", d, d)

    # hat functions of the two endpoints restricted to the edge
    assert np.max(np.abs(dual_values(lambda x: 1.0 - param(x), a, b) - 1.0)) <= 1e-12
    assert np.max(np.abs(dual_values(param, a, b))) <= 1e-12
    length = np.linalg.norm(b - a, axis=1)
    grid = np.linspace(0.0, 1.0, 101)
    sup = np.array([np.max(np.abs(dual_weight(grid, h))) * h for h in length])
    assert np.max(np.abs(sup - 4.0)) <= 1e-12


def test_coefficients_match_midpoint_oracle(fichera_levels):
    mesh, asg = fichera_levels[2].mesh, fichera_levels[2].assignment
    coef = apply_Dh(x1_squared, mesh, asg)
    for n in asg.assigned:
        a, b = mesh.nodes[n], mesh.nodes[asg.other[n]]
        oracle = midpoint_dual(x1_squared, a, b)
        # composite midpoint error for this cubic integrand is h^2/24 * int g''
        assert coef[n] == pytest.approx(oracle, abs=2e-4)
        fine = midpoint_dual(x1_squared, a, b, 128)
        assert coef[n] == pytest.approx((4 * fine - oracle) / 3, abs=1e-12)


def test_p1_reproduction_and_exclusion(fichera_levels, rng):
    for n in (2, 4, 8):
        d = fichera_levels[n]
        f = affine(rng.normal(), rng.normal(size=3))
        coef = apply_Dh(f, d.mesh, d.assignment)
        ok = ~d.classification.excluded
        assert np.max(np.abs(coef[ok] - f(d.mesh.nodes[ok]))) <= 1e-12
        assert np.all(coef[d.classification.excluded] == 0.0)
        clean = ~d.classification.excluded[d.mesh.tets].any(axis=1)
        tet_nodes = np.unique(d.mesh.tets[clean])
        assert np.max(np.abs(coef[tet_nodes] - f(d.mesh.nodes[tet_nodes]))) <= 1e-12


def _vanishing_on_boundary(x):
    gap = x - np.clip(x, 0.0, 1.0)
    dist_cube = np.linalg.norm(gap, axis=1)
    return np.prod(1 - x**2, axis=1) * dist_cube * (2 + np.sin(x[:, 0]))


def test_boundary_preservation(fichera_levels):
    for n in (2, 4):
        d = fichera_levels[n]
        coef = apply_Dh(_vanishing_on_boundary, d.mesh, d.assignment)
        bnd = d.classification.boundary
        assert len(bnd) > 0
        assert np.max(np.abs(coef[bnd])) <= 1e-14


def test_coupling_edge_nodes_use_that_edge(fichera_levels):
    mesh, asg = fichera_levels[4].mesh, fichera_levels[4].assignment
    checked = 0
    for m in mesh.macros:
        for i in range(4):
            for j in range(i + 1, 4):
                a, b = m.vertices[i], m.vertices[j]
                d = (b - a) / np.linalg.norm(b - a)
                rel = mesh.nodes - a
                s = rel @ d
                on = (np.linalg.norm(rel - s[:, None] * d, axis=1) < 1e-10) & (s > 1e-10) & (
                    s < np.linalg.norm(b - a) - 1e-10)
                for node in np.flatnonzero(on):
                    if asg.other[node] == NO_EDGE:
                        continue
                    e = mesh.nodes[asg.other[node]] - mesh.nodes[node]
                    assert np.linalg.norm(np.cross(e, d)) < 1e-10 * np.linalg.norm(e)
                    checked += 1
    assert checked > 0


def test_type3_projection_consistency():
    mesh = build_mesh([TYPE3], 4)
    asg = select_sigma(mesh)
    assert validate_assignment(mesh, asg) == []
    groups = defaultdict(list)
    for n in asg.assigned:
        groups[tuple(np.round(mesh.nodes[n, :2], 12))].append(n)
    stacked = [g for g in groups.values() if len(g) > 1]
    assert stacked
    for g in stacked:
        proj = mesh.nodes[asg.other[g], :2]
        assert np.max(np.abs(proj - proj[0])) <= 1e-12


def test_patch_invariants(fichera_levels):
    for n in (2, 4):
        d = fichera_levels[n]
        mesh, asg = d.mesh, d.assignment
        for t, patch in enumerate(d.patches):
            assert t in patch
            assert np.all(mesh.macro_of[patch] == mesh.macro_of[t])
            verts = set(mesh.tets[patch].ravel().tolist())
            for node in mesh.tets[t]:
                if asg.other[node] != NO_EDGE:
                    assert int(asg.other[node]) in verts


def test_isotropic_patches_stay_in_star(fichera_levels):
    d = fichera_levels[4]
    mesh = d.mesh
    iso = [t for t in range(mesh.n_tets) if not mesh.macros[mesh.macro_of[t]].anisotropic]
    for t in iso[::7]:
        star = np.flatnonzero(np.isin(mesh.tets, mesh.tets[t]).any(axis=1))
        assert set(d.patches[t].tolist()) <= set(star.tolist())


def test_anisotropic_patches_stay_in_strip(fichera_levels):
    d = fichera_levels[4]
    mesh = d.mesh
    for t in np.flatnonzero([mesh.macros[k].anisotropic for k in mesh.macro_of])[::5]:
        assert np.all(mesh.tet_strip[d.patches[t]] == mesh.tet_strip[t])


def test_patch_overlap_bounded():
    macros = build_fichera_macros()
    overlaps = []
    for n in (2, 4, 8, 16):
        mesh = build_mesh(macros, n)
        overlaps.append(patch_overlap(build_patches(mesh, select_sigma(mesh)), mesh.n_tets))
    # coarsest level has too few layers to realise the worst local configuration
    assert overlaps[1] == overlaps[2] == overlaps[3]
    assert overlaps[0] <= overlaps[1]


def test_lagrange_interpolate_nodal():
    mesh = build_mesh(build_cube_macros()[:1], 1)
    f = lambda x: x[:, 0] * x[:, 1]  # noqa: E731
    np.testing.assert_array_equal(lagrange_interpolate(f, mesh), mesh.nodes[:, 0] * mesh.nodes[:, 1])


def test_macro_split(fichera_macros, rng):
    lin = affine(0.3, [1.0, -2.0, 0.5])
    split = macro_lagrange_split(lin, fichera_macros)
    x = rng.uniform(-1, 1, size=(200, 3))
    x = x[~np.all(x > 0, axis=1)]
    assert np.max(np.abs(split.remainder(x))) < 1e-13
    m = fichera_macros[5]
    dist2 = lambda y: np.sum((y - m.vertices[2]) ** 2, axis=1)  # noqa: E731
    split = macro_lagrange_split(dist2, fichera_macros)
    assert np.max(np.abs(split.remainder(m.vertices, 5))) < 1e-13


def test_macro_split_vanishes_on_singular_edges(fichera_levels):
    from anisofem.fem import solve_poisson
    from anisofem.functions import fichera_source

    mesh = fichera_levels[4].mesh
    _, sol = solve_poisson(mesh, fichera_source, singular_points=np.zeros((1, 3)))
    from anisofem.fem import PointLocator

    loc = PointLocator(mesh)

    def uh(x):
        t, b = loc.locate(x)
        return np.einsum("pk,pk->p", b, sol.u[mesh.tets[t]])

    split = macro_lagrange_split(uh, mesh.macros)
    s = np.linspace(0, 1, 11)
    pts = np.vstack([s[:, None] * e for e in np.eye(3)])
    assert np.max(np.abs(split.remainder(pts))) <= 1e-10


def test_debug_dumps(tmp_path, fichera_levels):
    d = fichera_levels[2]
    write_sigma_csv(tmp_path / "s.csv", d.assignment)
    write_patch_csv(tmp_path / "p.csv", d.patches)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "node,sigma_a,sigma_b" and len(lines) == len(d.assignment.assigned) + 1
    assert len((tmp_path / "p.csv").read_text().splitlines()) == d.mesh.n_tets + 1
