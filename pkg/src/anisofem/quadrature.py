"""Quadrature rules on tetrahedra, triangles and segments.

Tetrahedral rules are stored in barycentric form: ``points`` has shape
``(q, 4)`` and ``weights`` sum to one, so that

    integral over T of g  ~=  |T| * sum_q w_q g(x_q).
"""
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # barycentric, (q, 4) or (q, 3)
    weights: np.ndarray  # normalised to sum 1
    degree: int


def _orbit(bary):
    return np.array(sorted(set(permutations(bary))), dtype=float)


def _symmetric_rule(orbits, degree):
    pts, wts = [], []
    for bary, w in orbits:
        orb = _orbit(bary)
        pts.append(orb)
        wts.append(np.full(len(orb), w))
    return QuadratureRule(np.vstack(pts), np.concatenate(wts), degree)


@lru_cache(maxsize=None)
def tet_rule(degree=5):
    """Symmetric tetrahedral rule exact for polynomials of ``degree``."""
    if degree <= 1:
        return QuadratureRule(np.full((1, 4), 0.25), np.ones(1), 1)
    if degree == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        return _symmetric_rule([((a, b, b, b), 0.25)], 2)
    if degree == 3:
        return QuadratureRule(
            np.vstack([np.full((1, 4), 0.25), _orbit((0.5, 1 / 6, 1 / 6, 1 / 6))]),
            np.array([-0.8] + [0.45] * 4),
            3,
        )
    if degree <= 5:
        # 14-point positive rule (degree 5)
        a1, a2, b = 0.0927352503108912, 0.3108859192633006, 0.0455037041256496
        return _symmetric_rule(
            [
                ((1 - 3 * a1, a1, a1, a1), 0.0734930431163619),
                ((1 - 3 * a2, a2, a2, a2), 0.1126879257180158),
                ((0.5 - b, 0.5 - b, b, b), 0.0425460207770814),
            ],
            5,
        )
    return conical_tet_rule((degree + 4) // 2)


@lru_cache(maxsize=None)
def conical_tet_rule(q):
    """Collapsed-coordinate product rule, exact to degree ``2q-3``."""
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x + 1)
    w = 0.5 * w
    s, t, u = np.meshgrid(x, x, x, indexing="ij")
    ws, wt, wu = np.meshgrid(w, w, w, indexing="ij")
    # unit cube -> reference tet
    l1 = s
    l2 = (1 - s) * t
    l3 = (1 - s) * (1 - t) * u
    jac = (1 - s) ** 2 * (1 - t)
    bary = np.stack([1 - l1 - l2 - l3, l1, l2, l3], axis=-1).reshape(-1, 4)
    weights = (ws * wt * wu * jac).ravel() * 6.0
    return QuadratureRule(bary, weights, 2 * q - 3)


@lru_cache(maxsize=None)
def triangle_rule(degree=4):
    """Symmetric triangle rule in barycentric form (weights sum to one)."""
    if degree <= 1:
        return QuadratureRule(np.full((1, 3), 1 / 3), np.ones(1), 1)
    if degree == 2:
        return QuadratureRule(_orbit((2 / 3, 1 / 6, 1 / 6)), np.full(3, 1 / 3), 2)
    # Dunavant 6-point, degree 4
    a, wa = 0.445948490915965, 0.223381589678011
    b, wb = 0.091576213509771, 0.109951743655322
    pts = np.vstack([_orbit((1 - 2 * a, a, a)), _orbit((1 - 2 * b, b, b))])
    return QuadratureRule(pts, np.concatenate([np.full(3, wa), np.full(3, wb)]), 4)


@lru_cache(maxsize=None)
def gauss_legendre(q=5):
    """Gauss-Legendre points on [0, 1] with weights summing to one."""
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (x + 1), 0.5 * w


def map_points(verts, rule):
    """Physical quadrature points for a batch of simplices.

    verts: (m, k, 3) simplex vertices. Returns (m, q, 3).
    """
    return np.einsum("qk,mkd->mqd", rule.points, verts)


def tet_volumes(verts):
    """Signed volumes of tetrahedra given as (m, 4, 3)."""
    d = verts[:, 1:] - verts[:, :1]
    return np.linalg.det(d) / 6.0


def vertex_collapsed_points(verts, n_radial=6, layers=3):
    """Quadrature resolving a point singularity at vertex 0 of each tet.

    The tet is written as a cone ``x = v0 + s (y - v0)`` over its opposite
    face, and the radial variable ``s`` is split into ``layers`` dyadic
    intervals towards the apex, each carrying ``n_radial`` Gauss points.
    Returns points (m, q, 3) and weights (m, q) that integrate over the
    physical element (not normalised).
    """
    xs, ws = gauss_legendre(n_radial)
    edges = [0.0] + [2.0 ** (-k) for k in range(layers, -1, -1)]
    s_pts, s_wts = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s_pts.append(lo + (hi - lo) * xs)
        s_wts.append((hi - lo) * ws)
    s_pts = np.concatenate(s_pts)
    s_wts = np.concatenate(s_wts)
    tri = triangle_rule(4)
    # barycentric in the tet: (1 - s) at apex, s * tri on the opposite face
    face = np.hstack([np.zeros((len(tri.weights), 1)), tri.points])
    apex = np.array([1.0, 0.0, 0.0, 0.0])
    bary = ((1 - s_pts)[:, None, None] * apex + s_pts[:, None, None] * face[None]).reshape(-1, 4)
    w_ref = (s_wts[:, None] * s_pts[:, None] ** 2 * 3.0 * tri.weights[None, :]).ravel()
    vol = np.abs(tet_volumes(verts))
    pts = np.einsum("qk,mkd->mqd", bary, verts)
    return pts, vol[:, None] * w_ref[None, :], bary
