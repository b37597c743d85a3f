"""Singular exponents of polyhedral corners and edges.

The vertex exponent of a cone is obtained from the first Dirichlet
eigenvalue ``mu1`` of the Laplace-Beltrami operator on the spherical cap
``G = cone ∩ S^2`` via ``lambda = -1/2 + sqrt(1/4 + mu1)``.  The cap is
approximated by a refined, projected octahedron; caps are unions of
octants, which covers the Fichera corner (seven octants), the half-space
(four octants) and the octant itself.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import eigsh

OCTANT_PATCHES = {
    # sign patterns (sx, sy, sz) of the octants forming the cap
    "fichera": [s for s in np.ndindex(2, 2, 2) if s != (0, 0, 0)],
    "halfspace": [s for s in np.ndindex(2, 2, 2) if s[2] == 0],
    "octant": [(0, 0, 0)],
}


def edge_exponent(omega):
    """Leading edge exponent ``pi / omega`` for interior dihedral angle ``omega``."""
    if not 0 < omega <= 2 * math.pi:
        raise ValueError("dihedral angle must lie in (0, 2 pi]")
    return math.pi / omega


def sphere_mesh(level):
    """Octahedron refined ``level`` times by midpoint subdivision and projected."""
    verts = [tuple(v) for v in np.vstack([np.eye(3), -np.eye(3)])]
    x, y, z, mx, my, mz = range(6)
    tris = [(x, y, z), (y, mx, z), (mx, my, z), (my, x, z),
            (y, x, mz), (mx, y, mz), (my, mx, mz), (x, my, mz)]
    pts = np.array(verts, dtype=float)
    tris = np.array(tris)
    for _ in range(level):
        edges = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mids = pts[uniq].mean(axis=1)
        mids /= np.linalg.norm(mids, axis=1)[:, None]
        mid_id = len(pts) + inv.reshape(3, -1).T  # (T, 3) for edges 01, 12, 20
        pts = np.vstack([pts, mids])
        a, b, c = tris.T
        m01, m12, m20 = mid_id.T
        tris = np.vstack([
            np.stack([a, m01, m20], 1), np.stack([m01, b, m12], 1),
            np.stack([m20, m12, c], 1), np.stack([m01, m12, m20], 1),
        ])
    return pts, tris


def _p1_matrices(pts, tris):
    v = pts[tris]
    e0, e1, e2 = v[:, 2] - v[:, 1], v[:, 0] - v[:, 2], v[:, 1] - v[:, 0]
    nrm = np.cross(e2, -e1)
    area = 0.5 * np.linalg.norm(nrm, axis=1)
    e = np.stack([e0, e1, e2], axis=1)  # edge opposite vertex i
    stiff = np.einsum("tid,tjd->tij", e, e) / (4 * area)[:, None, None]
    mass = (np.ones((3, 3)) + np.eye(3)) / 12.0 * area[:, None, None]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    n = len(pts)
    k = coo_matrix((stiff.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    m = coo_matrix((mass.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return k, m


def cap_eigenvalue(patch="fichera", level=5):
    """First Dirichlet Laplace-Beltrami eigenvalue on the cap at one level."""
    if patch not in OCTANT_PATCHES:
        raise ValueError(f"unknown patch {patch!r}; choose from {sorted(OCTANT_PATCHES)}")
    pts, tris = sphere_mesh(level)
    cen = pts[tris].mean(axis=1)
    code = [tuple(int(c) for c in row) for row in (cen < 0)]
    wanted = set(OCTANT_PATCHES[patch])
    inside = np.array([c in wanted for c in code])
    used = np.unique(tris[inside])
    touched_outside = np.unique(tris[~inside])
    free = np.setdiff1d(used, touched_outside)
    if len(free) == 0:
        raise ValueError("patch mesh has no interior vertices; refine further")
    k, m = _p1_matrices(pts, tris[inside])
    k = k[free][:, free]
    m = m[free][:, free]
    vals = eigsh(k, k=1, M=m, sigma=0.0, which="LM", return_eigenvectors=False)
    return float(vals[0])


@dataclass
class ExponentResult:
    lambda_v: float
    mu1: float
    level_values: list
    rate: float


def vertex_exponent(patch="fichera", level=6):
    """Vertex exponent of a corner with extrapolation over three levels."""
    if level < 2:
        raise ValueError("need at least level 2 for extrapolation")
    vals = [cap_eigenvalue(patch, lv) for lv in (level - 2, level - 1, level)]
    d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
    if d1 * d2 > 0 and abs(d2) > 1e-12 and abs(d1) > abs(d2):
        rate = math.log2(d1 / d2)
        mu1 = vals[2] - d2 / (2.0 ** rate - 1.0)
    else:
        rate = 2.0
        mu1 = vals[2] - d2 / 3.0
    lam = -0.5 + math.sqrt(0.25 + mu1)
    return ExponentResult(lam, mu1, vals, rate)
