"""Macroelement decompositions and graded tetrahedral meshes.

A polyhedral domain is described as a list of tetrahedral
:class:`Macroelement` objects.  Each macro carries at most one singular
edge and one singular vertex and is meshed according to its kind:

* ``TYPE1`` -- no singularity, uniform (Freudenthal) subdivision;
* ``TYPE2`` -- singular vertex only, the uniform subdivision is mapped
  radially so that nodes at normalised distance ``s`` move to ``s**(1/nu)``;
* ``TYPE3`` -- singular edge only, nodes live on ``n + 1`` planes that
  contain the opposite edge; inside every plane the distance to the
  singular edge is graded with ``s -> s**(1/mu)``;
* ``TYPE4`` -- as ``TYPE3`` with the plane offsets along the singular edge
  graded towards the singular vertex with ``s -> s**(1/nu)``.
"""
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from itertools import combinations, permutations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .quadrature import tet_volumes

INF = math.inf
MERGE_TOL = 1e-9
PARALLEL_TOL = 1e-9
# plane label for nodes on the edge opposite to the singular edge (on all planes)
ALL_PLANES = -2

#: leading vertex exponent of the Fichera corner, see exponents.vertex_exponent
FICHERA_LAMBDA_V = 0.454
FICHERA_LAMBDA_E = 2.0 / 3.0


class MacroKind(IntEnum):
    TYPE1 = 1
    TYPE2 = 2
    TYPE3 = 3
    TYPE4 = 4


class MeshError(ValueError):
    """Raised for invalid macro data or a failed mesh invariant."""


def _kind_from_exponents(lambda_e, lambda_v):
    edge, vertex = math.isfinite(lambda_e), math.isfinite(lambda_v)
    return MacroKind(1 + vertex + 2 * edge)


@dataclass
class Macroelement:
    """Tetrahedral macroelement.

    ``vertices`` is stored in canonical order: for kinds 3 and 4 the
    singular edge is ``(0, 1)``; for kinds 2 and 4 the singular vertex is
    ``0``.  Use :meth:`from_raw` to build a macro from arbitrarily ordered
    vertices plus the indices of its singular features.
    """

    vertices: np.ndarray
    kind: MacroKind
    mu: float = 1.0
    nu: float = 1.0
    lambda_e: float = INF
    lambda_v: float = INF

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(4, 3)
        self.kind = MacroKind(self.kind)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("macro vertices must be finite")
        if abs(tet_volumes(self.vertices[None])[0]) < 1e-14:
            raise MeshError("degenerate macroelement")
        for name in ("mu", "nu"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise MeshError(f"{name}={value} outside (0, 1]")
        if not self.lambda_e > 0.5:
            raise MeshError(f"lambda_e={self.lambda_e} must exceed 1/2")
        if not self.lambda_v > 0.0:
            raise MeshError(f"lambda_v={self.lambda_v} must be positive")
        expected = _kind_from_exponents(self.lambda_e, self.lambda_v)
        if expected != self.kind:
            raise MeshError(
                f"kind {self.kind.name} inconsistent with lambda_e={self.lambda_e}, "
                f"lambda_v={self.lambda_v} (expected {expected.name})"
            )
        if abs(self.lambda_v - 0.5) < 1e-6:
            warnings.warn("vertex exponent 1/2 is excluded by the regularity theory")

    @classmethod
    def from_raw(cls, vertices, kind, mu=1.0, nu=1.0, lambda_e=INF, lambda_v=INF,
                 singular_vertex=None, singular_edge=None):
        """Reorder vertices so that the singular features come first."""
        vertices = np.asarray(vertices, dtype=float).reshape(4, 3)
        kind = MacroKind(kind)
        order = list(range(4))
        if kind in (MacroKind.TYPE3, MacroKind.TYPE4):
            if singular_edge is None:
                raise MeshError("kind 3/4 macros need a singular edge")
            a, b = singular_edge
            if kind == MacroKind.TYPE4:
                if singular_vertex not in (a, b):
                    raise MeshError("singular vertex must be an endpoint of the singular edge")
                if singular_vertex == b:
                    a, b = b, a
            order = [a, b] + [i for i in range(4) if i not in (a, b)]
        elif kind == MacroKind.TYPE2:
            if singular_vertex is None:
                raise MeshError("kind 2 macros need a singular vertex")
            order = [singular_vertex] + [i for i in range(4) if i != singular_vertex]
        return cls(vertices[order], kind, mu, nu, lambda_e, lambda_v)

    @property
    def singular_vertex(self):
        return 0 if self.kind in (MacroKind.TYPE2, MacroKind.TYPE4) else None

    @property
    def singular_edge(self):
        return (0, 1) if self.kind in (MacroKind.TYPE3, MacroKind.TYPE4) else None

    @property
    def volume(self):
        return abs(tet_volumes(self.vertices[None])[0])

    @property
    def anisotropic(self):
        return self.kind in (MacroKind.TYPE3, MacroKind.TYPE4)

    def local_frame(self):
        """Return ``(origin, Q)`` with ``x_local = (x - origin) @ Q``.

        The singular vertex (if any) is the origin and the singular edge
        (if any) points along the third local axis.
        """
        v = self.vertices
        origin = v[0]
        if self.anisotropic:
            e3 = v[1] - v[0]
        elif self.kind == MacroKind.TYPE2:
            # axis through the vertex that meets the macro only at the vertex
            c = v[1:].mean(axis=0) - v[0]
            c /= np.linalg.norm(c)
            e3 = np.cross(c, v[1] - v[0])
            if np.linalg.norm(e3) < 1e-12:
                e3 = np.cross(c, v[2] - v[0])
        else:
            return origin, np.eye(3)
        e3 = e3 / np.linalg.norm(e3)
        trial = np.eye(3)[np.argmin(np.abs(e3))]
        e1 = np.cross(trial, e3)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(e3, e1)
        return origin, np.column_stack([e1, e2, e3])

    def to_local(self, x):
        origin, q = self.local_frame()
        return (np.asarray(x) - origin) @ q

    def faces(self):
        """The four faces as index triples into ``vertices``."""
        return [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]


@dataclass
class PlaneFamily:
    """Planes through the edge opposite to the singular edge of a macro."""

    macro_id: int
    normals: np.ndarray  # (n + 1, 3) unit normals
    offsets: np.ndarray  # (n + 1,) with normals[i] @ x == offsets[i] on plane i

    @property
    def layer_count(self):
        return len(self.offsets) - 1

    def distance(self, i, x):
        return np.asarray(x) @ self.normals[i] - self.offsets[i]


@dataclass
class SizeTriple:
    h1: float
    h2: float
    h3: float
    hT: float


@dataclass
class Mesh:
    """Conforming tetrahedral mesh built from a macro decomposition.

    Besides geometry the mesh keeps the generation structure of the
    anisotropic macros: for every macro of kind 3/4 ``layer_nodes[l]`` is an
    ``(n + 1, P)`` array with the node of plane ``i`` and in-plane node
    ``m``; ``inplane_kj[l]`` gives ``(k, j)`` for each in-plane node
    (``k`` counts rows away from the singular edge).
    """

    nodes: np.ndarray
    tets: np.ndarray
    macro_of: np.ndarray
    macros: list
    n: int
    plane_families: dict = field(default_factory=dict)
    layer_nodes: dict = field(default_factory=dict)
    inplane_kj: dict = field(default_factory=dict)
    inplane_tris: dict = field(default_factory=dict)
    tet_vplane: np.ndarray = None  # (M, 4) plane label per tet vertex, -1 if isotropic
    tet_strip: np.ndarray = None
    tet_tri: np.ndarray = None

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    def tet_vertices(self, idx=None):
        t = self.tets if idx is None else self.tets[idx]
        return self.nodes[t]

    def volumes(self):
        return tet_volumes(self.nodes[self.tets])

    def gradients(self):
        """Barycentric gradients per tet, shape (M, 4, 3), and volumes."""
        v = self.nodes[self.tets]
        d = v[:, 1:] - v[:, :1]
        inv = np.linalg.inv(d)  # columns are gradients of lambda_1..3
        g = np.empty((len(v), 4, 3))
        g[:, 1:] = inv.swapaxes(1, 2)
        g[:, 0] = -g[:, 1:].sum(axis=1)
        return g, np.linalg.det(d) / 6.0

    def edges(self):
        """Unique sorted edges (E, 2)."""
        pairs = self.tets[:, list(combinations(range(4), 2))].reshape(-1, 2)
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    def faces(self):
        """Unique sorted faces with their element multiplicity."""
        f = self.tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3)
        f = np.sort(f, axis=1)
        return np.unique(f, axis=0, return_counts=True)


# ----------------------------------------------------------------------------
# macro decompositions


def build_fichera_macros(mu=0.5, nu=0.5, lambda_e=FICHERA_LAMBDA_E,
                         lambda_v=FICHERA_LAMBDA_V, quasi_uniform=False):
    """Decompose the Fichera domain ``(-1,1)^3 \\ [0,1]^3`` into 42 macros.

    Each of the seven unit cubes around the concave corner is split into
    the six Kuhn tetrahedra whose common diagonal starts at the origin.
    Every macro then contains the concave vertex, and exactly those whose
    first path edge lies on a positive half axis contain a concave edge.

    Edge and vertex macros share faces whose radial grading is ``mu`` on one
    side and ``nu`` on the other, so only ``mu == nu`` meshes conform.
    """
    if quasi_uniform:
        mu = nu = 1.0
    if not math.isclose(mu, nu, rel_tol=0.0, abs_tol=1e-12):
        raise MeshError(f"mu={mu} and nu={nu} differ; the Fichera decomposition conforms only for mu == nu")
    macros = []
    for signs in np.ndindex(2, 2, 2):
        s = 1 - 2 * np.array(signs)  # (+,+,+) first
        if np.all(s > 0):
            continue
        for perm in permutations(range(3)):
            path = [np.zeros(3)]
            for ax in perm:
                step = np.zeros(3)
                step[ax] = s[ax]
                path.append(path[-1] + step)
            first = path[1]
            on_concave_edge = np.all(first >= 0)
            if on_concave_edge:
                macros.append(Macroelement(np.array(path), MacroKind.TYPE4, mu, nu,
                                           lambda_e, lambda_v))
            else:
                macros.append(Macroelement(np.array(path), MacroKind.TYPE2, 1.0, nu,
                                           INF, lambda_v))
    validate_fichera(macros)
    return macros


def fichera_singular_features():
    """Concave edges (as segments) and the concave vertex of the Fichera domain."""
    o = np.zeros(3)
    edges = [(o, np.eye(3)[k]) for k in range(3)]
    return edges, [o]


def count_singular_features(macro, edges, vertices, tol=1e-12):
    """Count singular edges/vertices of the domain that are features of ``macro``."""
    v = macro.vertices

    def is_vertex(p):
        return np.any(np.linalg.norm(v - p, axis=1) < tol)

    n_vert = sum(is_vertex(p) for p in vertices)
    n_edge = sum(is_vertex(a) and is_vertex(b) for a, b in edges)
    return n_edge, n_vert


def validate_fichera(macros):
    edges, vertices = fichera_singular_features()
    for idx, m in enumerate(macros):
        n_edge, n_vert = count_singular_features(m, edges, vertices)
        if n_edge > 1 or n_vert > 1:
            raise MeshError(f"macro {idx} carries {n_edge} singular edges, {n_vert} vertices")
        if (n_edge == 1) != m.anisotropic:
            raise MeshError(f"macro {idx}: kind {m.kind.name} but {n_edge} singular edges")
        if n_edge == 1:
            a, b = m.vertices[0], m.vertices[1]
            if not any(np.allclose(a, e0) and np.allclose(b, e1) for e0, e1 in edges):
                raise MeshError(f"macro {idx}: singular edge not in canonical position")


def build_cube_macros():
    """Unit cube ``[0,1]^3`` as six uniform Kuhn macros (no singularities)."""
    macros = []
    for perm in permutations(range(3)):
        path = [np.zeros(3)]
        for ax in perm:
            path.append(path[-1] + np.eye(3)[ax])
        macros.append(Macroelement(np.array(path), MacroKind.TYPE1))
    return macros


def check_grading(mu, nu, lambda_e, lambda_v):
    """Check the grading conditions ``mu < lambda_e``, ``nu < lambda_v + 1/2``
    and ``1/nu + (lambda_v - 1/2)/mu > 1``.

    Infinite exponents mean "no singularity" and satisfy the conditions
    they enter.  Returns ``(ok, message)``.
    """
    for name, value in (("mu", mu), ("nu", nu)):
        if not 0.0 < value <= 1.0:
            raise ValueError(f"{name}={value} outside (0, 1]")
    for name, value in (("lambda_e", lambda_e), ("lambda_v", lambda_v)):
        if not value > 0.0:
            raise ValueError(f"{name}={value} must be positive")
    failures = []
    if math.isfinite(lambda_e) and not mu < lambda_e:
        failures.append(f"mu={mu} >= lambda_e={lambda_e}")
    if math.isfinite(lambda_v):
        if not nu < lambda_v + 0.5:
            failures.append(f"nu={nu} >= lambda_v + 1/2 = {lambda_v + 0.5}")
        mixed = 1.0 / nu + (lambda_v - 0.5) / mu
        if not mixed > 1.0:
            failures.append(f"1/nu + (lambda_v - 1/2)/mu = {mixed:.6g} <= 1")
    if failures:
        return False, "; ".join(failures)
    return True, "grading conditions satisfied"


# ----------------------------------------------------------------------------
# meshing of single macros


@lru_cache(maxsize=8)
def _freudenthal(n):
    """Kuhn simplex ``1 >= s1 >= s2 >= s3 >= 0`` subdivided into ``n**3`` tets.

    Returns integer lattice points ``(P, 3)`` and tets indexing them.
    """
    pts = [(a, b, c) for a in range(n + 1) for b in range(a + 1) for c in range(b + 1)]
    index = {p: i for i, p in enumerate(pts)}
    tets = []
    eye = np.eye(3, dtype=int)
    for base in np.ndindex(n, n, n):
        base = np.array(base)
        for perm in permutations(range(3)):
            verts = [base]
            for ax in perm:
                verts.append(verts[-1] + eye[ax])
            cen = np.mean(verts, axis=0)
            if not (cen[0] > cen[1] > cen[2]):
                continue
            tets.append([index[tuple(v)] for v in verts])
    return np.array(pts, dtype=float), np.array(tets, dtype=np.int64)


def _mesh_isotropic(macro, n):
    lat, tets = _freudenthal(n)
    s = lat / n
    p = macro.vertices
    steps = p[1:] - p[:-1]
    x = p[0] + s @ steps
    if macro.kind == MacroKind.TYPE2 and macro.nu < 1.0:
        rho = s[:, 0]  # 1 - barycentric coordinate of vertex 0
        scale = np.ones_like(rho)
        pos = rho > 0
        scale[pos] = rho[pos] ** (1.0 / macro.nu - 1.0)
        x = p[0] + (x - p[0]) * scale[:, None]
    vplane = np.full(tets.shape, -1)
    return x, tets, vplane, None


@lru_cache(maxsize=8)
def _inplane_layout(n):
    kj = [(k, j) for k in range(n + 1) for j in range(k + 1)]
    index = {p: i for i, p in enumerate(kj)}
    tris = []
    for k in range(n):
        for j in range(k + 1):
            tris.append((index[k, j], index[k + 1, j], index[k + 1, j + 1]))
        for j in range(k):
            tris.append((index[k, j], index[k, j + 1], index[k + 1, j + 1]))
    return np.array(kj), np.array(tris, dtype=np.int64)


def plane_parameters(macro, n):
    """Plane offsets ``t_i`` along the singular edge and row distances ``rho_k``."""
    u = np.arange(n + 1) / n
    t = u ** (1.0 / macro.nu) if macro.kind == MacroKind.TYPE4 else u.copy()
    rho = u ** (1.0 / macro.mu)
    return t, rho


def _mesh_anisotropic(macro, n):
    a, b, c, d = macro.vertices
    kj, tris = _inplane_layout(n)
    n_in = len(kj)
    t, rho = plane_parameters(macro, n)
    k, j = kj[:, 0], kj[:, 1]
    eta = np.where(k > 0, j / np.maximum(k, 1), 0.0)
    r = rho[k]
    on_cd = k == n
    # local node ids: interior rows per plane, then the shared row on CD
    layer = np.empty((n + 1, n_in), dtype=np.int64)
    n_free = int((~on_cd).sum())
    free_idx = np.flatnonzero(~on_cd)
    for i in range(n + 1):
        layer[i, free_idx] = i * n_free + np.arange(n_free)
    layer[:, on_cd] = (n + 1) * n_free + np.arange(int(on_cd.sum()))
    coords = np.empty(((n + 1) * n_free + int(on_cd.sum()), 3))
    base = c + eta[:, None] * (d - c)
    for i in range(n + 1):
        apex = a + t[i] * (b - a)
        coords[layer[i]] = (1 - r)[:, None] * apex + r[:, None] * base
    srt = np.sort(tris, axis=1)
    # prism split: vertex m-index and plane offset (0 = lower, 1 = upper)
    split = [((0, 1, 2, 0), (0, 0, 0, 1)), ((1, 2, 0, 1), (0, 0, 1, 1)), ((2, 0, 1, 2), (0, 1, 1, 1))]
    tets, vplane, strip, tri_id = [], [], [], []
    tid = np.arange(len(tris))
    for i in range(n):
        for cols, up in split:
            m = srt[:, list(cols)]
            tet = layer[i + np.array(up), m]
            pl = np.where(on_cd[m], ALL_PLANES, i + np.array(up))
            srt_t = np.sort(tet, axis=1)
            keep = np.all(srt_t[:, 1:] != srt_t[:, :-1], axis=1)
            tets.append(tet[keep])
            vplane.append(pl[keep])
            strip.append(np.full(keep.sum(), i))
            tri_id.append(tid[keep])
    tets, vplane = np.vstack(tets), np.vstack(vplane)
    strip, tri_id = np.concatenate(strip), np.concatenate(tri_id)
    info = dict(layer=layer, kj=kj, tris=tris, strip=strip, tri=tri_id)
    return coords, tets, vplane, info


def _merge_nodes(coords, tol=MERGE_TOL):
    tree = cKDTree(coords)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    n = len(coords)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    # keep first-occurrence order for determinism
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_id = rank[inverse]
    merged = coords[first[order]]
    return merged, new_id


def build_mesh(macros, n):
    """Mesh every macro at refinement level ``n`` and glue them conformingly."""
    if int(n) != n or n < 1:
        raise MeshError(f"refinement level must be a positive integer, got {n}")
    n = int(n)
    if not macros:
        raise MeshError("empty macro list")
    all_coords, all_tets, all_macro, all_vplane = [], [], [], []
    all_strip, all_tri, infos = [], [], {}
    offset = 0
    for idx, macro in enumerate(macros):
        if not isinstance(macro, Macroelement):
            raise MeshError(f"macro {idx} is not a Macroelement")
        if macro.anisotropic:
            coords, tets, vplane, info = _mesh_anisotropic(macro, n)
            infos[idx] = (info, offset)
            all_strip.append(info["strip"])
            all_tri.append(info["tri"])
        else:
            coords, tets, vplane, _ = _mesh_isotropic(macro, n)
            all_strip.append(np.full(len(tets), -1))
            all_tri.append(np.full(len(tets), -1))
        all_coords.append(coords)
        all_tets.append(tets + offset)
        all_macro.append(np.full(len(tets), idx))
        all_vplane.append(vplane)
        offset += len(coords)
    coords = np.vstack(all_coords)
    nodes, new_id = _merge_nodes(coords)
    tets = new_id[np.vstack(all_tets)]
    macro_of = np.concatenate(all_macro)
    vplane = np.vstack(all_vplane)
    # positive orientation
    vol = tet_volumes(nodes[tets])
    neg = vol < 0
    tets[neg] = tets[neg][:, [1, 0, 2, 3]]
    vplane[neg] = vplane[neg][:, [1, 0, 2, 3]]
    mesh = Mesh(nodes, tets, macro_of, list(macros), n, tet_vplane=vplane,
                tet_strip=np.concatenate(all_strip), tet_tri=np.concatenate(all_tri))
    for idx, (info, off) in infos.items():
        mesh.layer_nodes[idx] = new_id[info["layer"] + off]
        mesh.inplane_kj[idx] = info["kj"]
        mesh.inplane_tris[idx] = info["tris"]
        mesh.plane_families[idx] = _plane_family(idx, macros[idx], n)
    return mesh


def _plane_family(idx, macro, n):
    a, b, c, d = macro.vertices
    t, _ = plane_parameters(macro, n)
    normals, offsets = [], []
    for ti in t:
        p = a + ti * (b - a)
        nrm = np.cross(c - p, d - p)
        nrm /= np.linalg.norm(nrm)
        normals.append(nrm)
        offsets.append(nrm @ p)
    return PlaneFamily(idx, np.array(normals), np.array(offsets))


# ----------------------------------------------------------------------------
# element sizes


def _edge_pairs():
    return list(combinations(range(4), 2))


def all_element_sizes(mesh):
    """Size triples for every element as an ``(M, 4)`` array ``h1, h2, h3, hT``."""
    v = mesh.nodes[mesh.tets]
    pairs = _edge_pairs()
    vec = np.stack([v[:, q] - v[:, p] for p, q in pairs], axis=1)  # (M, 6, 3)
    length = np.linalg.norm(vec, axis=2)
    diam = length.max(axis=1)
    out = np.repeat(diam[:, None], 4, axis=1)
    aniso = np.array([m.anisotropic for m in mesh.macros])[mesh.macro_of]
    if not aniso.any():
        return out
    ids = np.flatnonzero(aniso)
    axes = np.array([_axis(m) for m in mesh.macros])[mesh.macro_of[ids]]
    cross = np.linalg.norm(np.cross(vec[ids], axes[:, None, :]), axis=2)
    sin_angle = cross / length[ids]
    parallel = sin_angle < PARALLEL_TOL
    if not np.all(parallel.any(axis=1)):
        bad = ids[~parallel.any(axis=1)][0]
        raise MeshError(f"element {bad} has no edge parallel to the singular edge")
    e3 = np.argmax(parallel, axis=1)
    vp = mesh.tet_vplane[ids]
    pa = np.array(pairs)
    touches = np.array([[e != f and bool(set(pairs[e]) & set(pairs[f])) for f in range(6)]
                        for e in range(6)])
    lp, lq = vp[:, pa[:, 0]], vp[:, pa[:, 1]]
    same_plane = (lp == ALL_PLANES) | (lq == ALL_PLANES) | (lp == lq)
    cand = touches[e3] & same_plane
    lens = np.where(cand, length[ids], np.inf)
    lens.sort(axis=1)
    h1 = 0.5 * (lens[:, 0] + lens[:, 1])
    out[ids, 0] = h1
    out[ids, 1] = h1
    out[ids, 2] = length[ids, e3]
    return out


def element_sizes(mesh, t):
    """:class:`SizeTriple` of element ``t``."""
    if not 0 <= t < mesh.n_tets:
        raise IndexError(f"element index {t} out of range")
    sub = Mesh(mesh.nodes, mesh.tets[t:t + 1], mesh.macro_of[t:t + 1], mesh.macros, mesh.n,
               tet_vplane=mesh.tet_vplane[t:t + 1])
    h1, h2, h3, ht = all_element_sizes(sub)[0]
    return SizeTriple(h1, h2, h3, ht)


def _axis(macro):
    if not macro.anisotropic:
        return np.zeros(3)
    d = macro.vertices[1] - macro.vertices[0]
    return d / np.linalg.norm(d)


# ----------------------------------------------------------------------------
# node classification


INTERIOR, BOUNDARY, COUPLING, SINGULAR_EDGE = 0, 1, 2, 3


@dataclass
class NodeClassification:
    flags: np.ndarray

    @property
    def all(self):
        return np.arange(len(self.flags))

    @property
    def interior(self):
        return np.flatnonzero(self.flags == INTERIOR)

    @property
    def boundary(self):
        return np.flatnonzero(self.flags == BOUNDARY)

    @property
    def coupling(self):
        return np.flatnonzero(self.flags == COUPLING)

    @property
    def singular(self):
        return np.flatnonzero(self.flags == SINGULAR_EDGE)

    @property
    def excluded(self):
        """Nodes without a quasi-interpolation degree of freedom."""
        return self.flags >= COUPLING


def _face_key(points, ndigits=9):
    return tuple(sorted(tuple(np.round(p, ndigits) + 0.0) for p in points))


def macro_face_table(macros):
    """All macro faces with a flag telling whether they are shared.

    Returns a list of ``(macro_id, local_face, points(3,3), shared)``.
    """
    keys = {}
    rows = []
    for idx, m in enumerate(macros):
        for f in m.faces():
            pts = m.vertices[list(f)]
            key = _face_key(pts)
            keys.setdefault(key, []).append(idx)
            rows.append((idx, f, pts, key))
    return [(idx, f, pts, len(keys[key]) > 1) for idx, f, pts, key in rows]


def points_on_triangle(x, tri, tol=1e-10):
    """Boolean mask of points ``x`` lying on the closed triangle ``tri``."""
    a, b, c = tri
    nrm = np.cross(b - a, c - a)
    area2 = np.linalg.norm(nrm)
    nrm = nrm / area2
    dist = np.abs((x - a) @ nrm)
    # barycentric coordinates in the plane
    l_a = np.cross(c - b, x - b) @ nrm / area2
    l_b = np.cross(a - c, x - c) @ nrm / area2
    l_c = 1.0 - l_a - l_b
    inside = (l_a >= -tol) & (l_b >= -tol) & (l_c >= -tol)
    return (dist < tol) & inside


def points_on_segment(x, a, b, tol=1e-10):
    d = b - a
    length = np.linalg.norm(d)
    s = (x - a) @ d / length**2
    foot = a + np.clip(s, 0, 1)[:, None] * d
    return (np.linalg.norm(x - foot, axis=1) < tol * max(1.0, length)) & (s >= -tol) & (s <= 1 + tol)


def classify_nodes(mesh, macros=None):
    """Partition mesh nodes into interior, boundary, coupling and singular-edge sets.

    Coupling nodes are the mesh nodes at macro vertices; an unshared macro
    vertex lies on three macro faces, so no single edge could respect all of
    them, and the macro splitting interpolates there anyway.  Singular-edge nodes, including edge endpoints, take
    precedence over every other class.
    """
    macros = mesh.macros if macros is None else macros
    x = mesh.nodes
    flags = np.full(len(x), INTERIOR, dtype=np.int8)
    for idx, shared_face in enumerate(macro_face_table(macros)):
        _, _, pts, shared = shared_face
        if not shared:
            flags[points_on_triangle(x, pts)] = BOUNDARY
    corners = np.unique(np.round(np.vstack([m.vertices for m in macros]), 9) + 0.0, axis=0)
    d, i = cKDTree(x).query(corners)
    flags[i[d < 1e-9]] = COUPLING
    for m in macros:
        if m.anisotropic:
            flags[points_on_segment(x, m.vertices[0], m.vertices[1])] = SINGULAR_EDGE
    return NodeClassification(flags)


# ----------------------------------------------------------------------------
# quality


@dataclass
class QualityReport:
    max_dihedral_angle: float
    conformity_violations: int
    plane_violations: int
    node_count: int
    tet_count: int

    @property
    def valid(self):
        return self.conformity_violations == 0 and self.plane_violations == 0


def dihedral_angles(verts):
    """All six dihedral angles of each tet in ``verts`` (M, 4, 3)."""
    faces = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]
    normals = []
    for k, (a, b, c) in enumerate(faces):
        nrm = np.cross(verts[:, b] - verts[:, a], verts[:, c] - verts[:, a])
        # orient away from the opposite vertex
        sign = np.sign(np.einsum("md,md->m", nrm, verts[:, a] - verts[:, k]))
        normals.append(nrm * sign[:, None] / np.linalg.norm(nrm, axis=1)[:, None])
    angles = []
    for i, j in combinations(range(4), 2):
        cos = np.einsum("md,md->m", normals[i], normals[j])
        angles.append(np.pi - np.arccos(np.clip(cos, -1, 1)))
    return np.stack(angles, axis=1)


def mesh_quality(mesh):
    """Report conformity, plane containment and the maximal dihedral angle."""
    vol = mesh.volumes()
    violations = int(np.sum(vol <= 0))
    faces, counts = mesh.faces()
    violations += int(np.sum(counts > 2))
    single = faces[counts == 1]
    on_boundary = np.zeros(len(single), dtype=bool)
    cen = mesh.nodes[single].mean(axis=1)
    for _, _, pts, shared in macro_face_table(mesh.macros):
        if not shared:
            on_boundary |= points_on_triangle(cen, pts, tol=1e-9)
    violations += int(np.sum(~on_boundary))
    ok = vol > 0
    max_angle = float(dihedral_angles(mesh.nodes[mesh.tets[ok]]).max()) if ok.any() else np.pi

    plane_viol = 0
    for idx, fam in mesh.plane_families.items():
        layer = mesh.layer_nodes[idx]
        kj = mesh.inplane_kj[idx]
        free = kj[:, 0] < mesh.n
        for i in range(fam.layer_count + 1):
            ids = layer[i, free]
            dist = np.abs(mesh.nodes[ids] @ fam.normals[i] - fam.offsets[i])
            plane_viol += int(np.sum(dist > 1e-12 * 10))
        in_macro = mesh.macro_of == idx
        vp = mesh.tet_vplane[in_macro]
        for row in vp:
            labels = {p for p in row if p != ALL_PLANES}
            if len(labels) > 2 or (labels and max(labels) - min(labels) > 1):
                plane_viol += 1
    return QualityReport(max_angle, violations, plane_viol, mesh.n_nodes, mesh.n_tets)


# ----------------------------------------------------------------------------
# macro file format


def write_macro_file(path, macros):
    """Write macros in the line-oriented ASCII format read by :func:`read_macro_file`."""
    lines = [f"macros {len(macros)}"]
    for m in macros:
        coords = " ".join(f"{c:.17g}" for c in m.vertices.ravel())
        sv = -1 if m.singular_vertex is None else m.singular_vertex
        se = (-1, -1) if m.singular_edge is None else m.singular_edge
        lines.append(
            f"{coords} T{int(m.kind)} {m.mu:.17g} {m.nu:.17g} "
            f"{_fmt_inf(m.lambda_e)} {_fmt_inf(m.lambda_v)} {sv} {se[0]} {se[1]}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt_inf(x):
    return "inf" if math.isinf(x) else f"{x:.17g}"


def read_macro_file(path):
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "macros":
        raise MeshError("macro file must start with 'macros <count>'")
    count = int(rows[0][1])
    body = rows[1:]
    if len(body) != count:
        raise MeshError(f"header announces {count} macros, found {len(body)}")
    macros = []
    for lineno, tok in enumerate(body, start=2):
        if len(tok) != 20:
            raise MeshError(f"line {lineno}: expected 20 fields, got {len(tok)}")
        coords = np.array([float(t) for t in tok[:12]])
        kind_tag = tok[12].upper()
        if kind_tag not in ("T1", "T2", "T3", "T4"):
            raise MeshError(f"line {lineno}: unknown kind tag {tok[12]}")
        mu, nu, le, lv = (float(t) for t in tok[13:17])
        sv, ea, eb = (int(t) for t in tok[17:20])
        macros.append(Macroelement.from_raw(
            coords, int(kind_tag[1]), mu, nu, le, lv,
            singular_vertex=None if sv < 0 else sv,
            singular_edge=None if ea < 0 else (ea, eb),
        ))
    return macros
