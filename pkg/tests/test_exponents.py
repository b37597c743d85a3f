import math

import numpy as np
import pytest

from anisofem.exponents import cap_eigenvalue, edge_exponent, sphere_mesh, vertex_exponent


@pytest.mark.parametrize("omega, lam", [(1.5 * math.pi, 2 / 3), (math.pi, 1.0), (0.5 * math.pi, 2.0)])
def test_edge_exponent(omega, lam):
    assert edge_exponent(omega) == pytest.approx(lam, rel=1e-15)


def test_edge_exponent_decreasing_and_validated():
    w = np.linspace(0.1, 2 * math.pi, 50)
    assert np.all(np.diff([edge_exponent(x) for x in w]) < 0)
    for bad in (0.0, -1.0, 7.0):
        with pytest.raises(ValueError):
            edge_exponent(bad)


def test_sphere_mesh_on_unit_sphere():
    pts, tris = sphere_mesh(3)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    # closed surface: every edge shared by exactly two triangles
    e = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    assert len(pts) - len(e) // 2 + len(tris) == 2  # Euler characteristic


@pytest.mark.parametrize("patch, lam, tol", [("fichera", 0.454, 0.01), ("halfspace", 1.0, 0.01),
                                             ("octant", 3.0, 0.02)])
def test_vertex_exponent(patch, lam, tol):
    assert vertex_exponent(patch).lambda_v == pytest.approx(lam, abs=tol)


@pytest.mark.parametrize("patch", ["fichera", "halfspace", "octant"])
def test_eigenvalue_decreases_under_refinement(patch):
    vals = [cap_eigenvalue(patch, lv) for lv in (3, 4, 5)]
    assert vals[0] > vals[1] > vals[2]


def test_exponent_mapping():
    res = vertex_exponent("halfspace")
    assert res.lambda_v == pytest.approx(-0.5 + math.sqrt(0.25 + res.mu1), rel=1e-15)
    assert -0.5 + math.sqrt(0.25 + 2.0) == 1.0


def test_unknown_patch_and_level():
    with pytest.raises(ValueError):
        cap_eigenvalue("torus")
    with pytest.raises(ValueError):
        vertex_exponent("fichera", level=1)
