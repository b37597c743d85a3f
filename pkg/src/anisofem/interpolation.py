"""Quasi-interpolation with edge-based dual weights.

Every node ``n`` outside the coupling and singular-edge sets is assigned a
mesh edge ``sigma_n`` with ``n`` as one endpoint.  The nodal value of the
quasi-interpolant is the value at ``n`` of the L2(sigma_n) projection onto
linear polynomials, i.e. ``int_sigma u psi_n`` with the dual weight
``psi_n(t) = (4 - 6 t) / |sigma_n|`` (``t`` the normalised arclength from
``n``).
"""
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix

from .mesh import (ALL_PLANES, INTERIOR, MeshError, classify_nodes,
                   macro_face_table, points_on_triangle)
from .quadrature import gauss_legendre

NO_EDGE = -1


@dataclass
class EdgeAssignment:
    """``other[n]`` is the second endpoint of ``sigma_n`` (``-1`` if excluded)."""

    other: np.ndarray
    owner: np.ndarray  # macro whose rules produced sigma_n
    classification: object

    def edge(self, n):
        if self.other[n] == NO_EDGE:
            return None
        return int(n), int(self.other[n])

    @property
    def assigned(self):
        return np.flatnonzero(self.other != NO_EDGE)


@dataclass
class LinearOnEdge:
    """``a + b t`` on the edge ``start -> end`` with ``t`` in [0, 1]."""

    a: float
    b: float
    start: np.ndarray
    end: np.ndarray

    def __call__(self, t):
        return self.a + self.b * np.asarray(t)


# ----------------------------------------------------------------------------
# edge selection


def _face_membership(mesh):
    faces = {}
    for _, _, pts, _ in macro_face_table(mesh.macros):
        key = tuple(sorted(map(tuple, np.round(pts, 12))))
        faces[key] = pts
    masks = [points_on_triangle(mesh.nodes, pts) for pts in faces.values()]
    return np.stack(masks, axis=1)  # (N, F)


def _node_macros(mesh):
    pairs = np.unique(np.column_stack([mesh.tets.ravel(), np.repeat(mesh.macro_of, 4)]), axis=0)
    return pairs  # sorted by node, then macro


def _owner(mesh, pairs):
    aniso = np.array([m.anisotropic for m in mesh.macros])
    # smallest-index anisotropic macro first, then smallest index
    key = np.where(aniso[pairs[:, 1]], pairs[:, 1], pairs[:, 1] + len(mesh.macros))
    owner = np.full(mesh.n_nodes, -1)
    best = np.full(mesh.n_nodes, np.iinfo(np.int64).max)
    np.minimum.at(best, pairs[:, 0], key)
    owner = np.where(best >= len(mesh.macros), best - len(mesh.macros), best)
    return owner


def _layer_lookup(mesh, macro_id):
    """Map node id -> (plane i, in-plane index m) for a kind 3/4 macro."""
    layer = mesh.layer_nodes[macro_id]
    planes, ms = np.meshgrid(np.arange(layer.shape[0]), np.arange(layer.shape[1]), indexing="ij")
    # reverse order so that plane 0 wins for nodes shared by every plane
    ids, i, m = layer.ravel()[::-1], planes.ravel()[::-1], ms.ravel()[::-1]
    return {int(a): (int(b), int(c)) for a, b, c in zip(ids, i, m)}


def _inplane_neighbors(tris, n_in):
    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
    e = np.vstack([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    starts = np.searchsorted(e[:, 0], np.arange(n_in + 1))
    return [e[starts[m]:starts[m + 1], 1] for m in range(n_in)]


def _macro_edge_lists(mesh):
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    e = mesh.tets[:, pairs].reshape(-1, 2)
    mac = np.repeat(mesh.macro_of, 6)
    rows = np.vstack([np.column_stack([e[:, 0], e[:, 1], mac]),
                      np.column_stack([e[:, 1], e[:, 0], mac])])
    rows = np.unique(rows, axis=0)
    starts = np.searchsorted(rows[:, 0], np.arange(mesh.n_nodes + 1))
    return rows, starts


def select_sigma(mesh, classification=None):
    """Assign ``sigma_n`` to every node outside the coupling and singular sets.

    Admissible edges start at ``n``, lie in the owning macro, lie in every
    macro face that contains ``n`` and, for kind 3/4 owners, in a plane of
    the owner's plane family.  Among admissible edges the shortest wins
    (for kind 3/4 owners the length is measured in the first plane so that
    stacked nodes receive edges with equal projections); ties go to the
    smaller neighbour index.
    """
    cls = classification if classification is not None else classify_nodes(mesh)
    faces = _face_membership(mesh)
    owner = _owner(mesh, _node_macros(mesh))
    other = np.full(mesh.n_nodes, NO_EDGE)
    todo = np.flatnonzero(~cls.excluded)

    aniso_info = {}
    for idx in mesh.layer_nodes:
        tris = mesh.inplane_tris[idx]
        kj = mesh.inplane_kj[idx]
        aniso_info[idx] = (_layer_lookup(mesh, idx), _inplane_neighbors(tris, len(kj)))
    rows, starts = _macro_edge_lists(mesh)

    for node in todo:
        own = owner[node]
        need = faces[node]
        if own in aniso_info:
            lookup, nbrs = aniso_info[own]
            i, m = lookup[int(node)]
            layer = mesh.layer_nodes[own]
            cand_m = nbrs[m]
            cand = layer[i, cand_m]
            ref = mesh.nodes[layer[0]]
            length = np.linalg.norm(ref[cand_m] - ref[m], axis=1)
        else:
            r = rows[starts[node]:starts[node + 1]]
            cand = r[r[:, 2] == own, 1]
            length = np.linalg.norm(mesh.nodes[cand] - mesh.nodes[node], axis=1)
        ok = np.all(faces[cand] | ~need, axis=1)
        if not ok.any():
            raise MeshError(f"no admissible edge for node {node} (owner macro {own})")
        cand, length = cand[ok], length[ok]
        order = np.lexsort((cand, np.round(length, 12)))
        other[node] = cand[order[0]]
    return EdgeAssignment(other, owner, cls)


def validate_assignment(mesh, assignment):
    """Return a list of violated assignment rules (empty when valid)."""
    problems = []
    faces = _face_membership(mesh)
    edges = {tuple(e) for e in mesh.edges().tolist()}
    cls = assignment.classification
    for node in range(mesh.n_nodes):
        o = assignment.other[node]
        if cls.excluded[node]:
            if o != NO_EDGE:
                problems.append(f"node {node}: excluded node carries an edge")
            continue
        if o == NO_EDGE:
            problems.append(f"node {node}: missing edge")
            continue
        if tuple(sorted((node, int(o)))) not in edges:
            problems.append(f"node {node}: ({node},{o}) is not a mesh edge")
        if not np.all(faces[o] | ~faces[node]):
            problems.append(f"node {node}: edge leaves a macro face containing the node")
        own = assignment.owner[node]
        in_owner = np.any(np.all(np.isin(mesh.tets[mesh.macro_of == own], [node, o]).sum(1, keepdims=True) == 2, axis=1))
        if not in_owner:
            problems.append(f"node {node}: edge not inside owner macro {own}")
        if own in mesh.plane_families:
            fam = mesh.plane_families[own]
            d = np.abs(mesh.nodes[[node, o]] @ fam.normals.T - fam.offsets)
            if not np.any(np.all(d < 1e-10, axis=0)):
                problems.append(f"node {node}: edge not in a plane of macro {own}")
    return problems


# ----------------------------------------------------------------------------
# dual weights and edge projection


def dual_weight(t, length=1.0):
    """Dual weight ``psi`` at normalised position ``t`` measured from the node."""
    if length <= 0:
        raise ValueError("zero-length edge")
    return (4.0 - 6.0 * np.asarray(t)) / length


def edge_projection(f, start, end, q=5):
    """L2 projection of ``f`` onto linear functions on the segment ``start -> end``.

    ``f`` maps an ``(m, 3)`` point array to ``(m,)`` values.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    if np.linalg.norm(end - start) == 0:
        raise ValueError("zero-length edge")
    t, w = gauss_legendre(q)
    vals = f(start + t[:, None] * (end - start))
    basis = np.stack([np.ones_like(t), t], axis=1)
    gram = basis.T @ (w[:, None] * basis)
    rhs = basis.T @ (w * vals)
    a, b = np.linalg.solve(gram, rhs)
    return LinearOnEdge(a, b, start, end)


def dual_values(f, starts, ends, q=5):
    """``int_sigma f psi`` for many edges at once (value at ``starts``)."""
    t, w = gauss_legendre(q)
    pts = starts[:, None, :] + t[None, :, None] * (ends - starts)[:, None, :]
    vals = np.asarray(f(pts.reshape(-1, 3))).reshape(len(starts), len(t))
    return vals @ (w * (4.0 - 6.0 * t))


def apply_Dh(f, mesh, assignment, q=5):
    """Nodal coefficients of the quasi-interpolant of ``f``."""
    coef = np.zeros(mesh.n_nodes)
    ids = assignment.assigned
    if len(ids):
        coef[ids] = dual_values(f, mesh.nodes[ids], mesh.nodes[assignment.other[ids]], q)
    return coef


def lagrange_interpolate(f, mesh):
    return np.asarray(f(mesh.nodes), dtype=float)


# ----------------------------------------------------------------------------
# macro Lagrange splitting


@dataclass
class MacroLagrangeSplit:
    """``u = u_I + u_R`` with ``u_I`` linear on every macro."""

    f: object
    macros: list
    coeffs: np.ndarray  # (L, 4) affine coefficients per macro: c0 + c[1:] . x

    def locate(self, x, tol=1e-10):
        x = np.atleast_2d(x)
        out = np.full(len(x), -1)
        for idx, m in enumerate(self.macros):
            bary = _barycentric(m.vertices, x)
            hit = (out < 0) & np.all(bary >= -tol, axis=1)
            out[hit] = idx
        if np.any(out < 0):
            raise ValueError("point outside every macro")
        return out

    def interpolant(self, x, macro_id=None):
        x = np.atleast_2d(x)
        ids = self.locate(x) if macro_id is None else np.broadcast_to(macro_id, (len(x),))
        c = self.coeffs[ids]
        return c[:, 0] + np.einsum("md,md->m", c[:, 1:], x)

    def remainder(self, x, macro_id=None):
        x = np.atleast_2d(x)
        return np.asarray(self.f(x)) - self.interpolant(x, macro_id)


def _barycentric(verts, x):
    d = (verts[1:] - verts[0]).T
    lam = np.linalg.solve(d, (x - verts[0]).T).T
    return np.column_stack([1 - lam.sum(axis=1), lam])


def macro_lagrange_split(f, macros):
    coeffs = []
    for m in macros:
        vals = np.asarray(f(m.vertices), dtype=float)
        a = np.column_stack([np.ones(4), m.vertices])
        coeffs.append(np.linalg.solve(a, vals))
    return MacroLagrangeSplit(f, list(macros), np.array(coeffs))


# ----------------------------------------------------------------------------
# patches


def _node_to_tets(mesh):
    rows = mesh.tets.ravel()
    cols = np.repeat(np.arange(mesh.n_tets), 4)
    return coo_matrix((np.ones_like(rows), (rows, cols)), shape=(mesh.n_nodes, mesh.n_tets)).tocsr()


def _tri_adjacency(tris):
    e = {}
    for t, tri in enumerate(tris.tolist()):
        for a, b in ((0, 1), (1, 2), (0, 2)):
            e.setdefault(tuple(sorted((tri[a], tri[b]))), []).append(t)
    adj = [[] for _ in range(len(tris))]
    for ts in e.values():
        for a in ts:
            adj[a].extend(b for b in ts if b != a)
    return adj, e


def _bfs_path(start, targets, adj, allowed=None):
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur in targets:
            path = []
            while cur is not None:
                path.append(cur)
                cur = prev[cur]
            return path
        for nb in adj[cur]:
            if nb not in prev and (allowed is None or nb in allowed):
                prev[nb] = cur
                queue.append(nb)
    return None


def build_patches(mesh, assignment):
    """Patch ``S_T`` (array of tet indices) for every element ``T``.

    Kind 3/4 elements get a union of prisms of their own strip; kind 1/2
    elements get the smallest face-connected part of a vertex star in their
    macro that reaches every ``sigma_n``.
    """
    patches = [None] * mesh.n_tets
    n2t = _node_to_tets(mesh)
    other = assignment.other

    prism_tets = {}
    for idx in mesh.layer_nodes:
        sel = np.flatnonzero(mesh.macro_of == idx)
        keys = mesh.tet_strip[sel] * len(mesh.inplane_tris[idx]) + mesh.tet_tri[sel]
        order = np.argsort(keys, kind="stable")
        uk, st = np.unique(keys[order], return_index=True)
        bounds = np.append(st, len(order))
        prism_tets[idx] = {int(k): sel[order[bounds[a]:bounds[a + 1]]] for a, k in enumerate(uk)}

    aniso = {}
    for idx in mesh.layer_nodes:
        adj, edge_tris = _tri_adjacency(mesh.inplane_tris[idx])
        aniso[idx] = (_layer_lookup_all(mesh, idx), adj, edge_tris)

    for t in range(mesh.n_tets):
        idx = int(mesh.macro_of[t])
        nodes = mesh.tets[t]
        if idx in aniso:
            lookup, adj, edge_tris = aniso[idx]
            s = int(mesh.tet_strip[t])
            tri0 = int(mesh.tet_tri[t])
            chosen = {tri0}
            for n in nodes:
                o = other[n]
                if o == NO_EDGE:
                    continue
                ma = _inplane_index(lookup, n, s)
                mb = _inplane_index(lookup, o, s)
                if ma is None or mb is None:
                    raise MeshError(f"sigma of node {n} leaves the strip of element {t}")
                targets = set(edge_tris.get(tuple(sorted((ma, mb))), []))
                if not targets:
                    raise MeshError(f"sigma of node {n} is not an in-plane edge of macro {idx}")
                if chosen & targets:
                    continue
                path = _bfs_path(tri0, targets, adj)
                chosen.update(path)
            ntri = len(mesh.inplane_tris[idx])
            members = [prism_tets[idx][s * ntri + c] for c in sorted(chosen)]
            patches[t] = np.unique(np.concatenate(members))
        else:
            chosen = {t}
            for n in nodes:
                o = other[n]
                if o == NO_EDGE or o in nodes:
                    continue
                star = n2t.indices[n2t.indptr[n]:n2t.indptr[n + 1]]
                star = star[mesh.macro_of[star] == idx]
                if any(o in mesh.tets[c] for c in chosen):
                    continue
                targets = {int(c) for c in star if o in mesh.tets[c]}
                adj = _star_adjacency(mesh, star)
                path = _bfs_path(t, targets, adj, allowed=set(star.tolist()))
                if path is None:
                    raise MeshError(f"sigma of node {n} not reachable inside macro {idx}")
                chosen.update(path)
            patches[t] = np.array(sorted(chosen))
    return patches


def _layer_lookup_all(mesh, idx):
    layer = mesh.layer_nodes[idx]
    table = {}
    for i in range(layer.shape[0]):
        for m, node in enumerate(layer[i].tolist()):
            table.setdefault(node, {})[i] = m
    return table


def _inplane_index(lookup, node, strip):
    entry = lookup.get(int(node))
    if entry is None:
        return None
    for i in (strip, strip + 1):
        if i in entry:
            return entry[i]
    return None


def _star_adjacency(mesh, star):
    adj = {int(c): [] for c in star}
    sets = {int(c): set(mesh.tets[c].tolist()) for c in star}
    keys = list(sets)
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            if len(sets[keys[a]] & sets[keys[b]]) == 3:
                adj[keys[a]].append(keys[b])
                adj[keys[b]].append(keys[a])
    return adj


def patch_overlap(patches, n_tets):
    """Maximum number of patches any element belongs to."""
    count = np.zeros(n_tets, dtype=int)
    for p in patches:
        count[p] += 1
    return int(count.max())


# ----------------------------------------------------------------------------
# debug dumps


def write_sigma_csv(path, assignment):
    with open(path, "w") as fh:
        fh.write("node,sigma_a,sigma_b\n")
        for n in assignment.assigned:
            fh.write(f"{n},{n},{assignment.other[n]}\n")


def write_patch_csv(path, patches):
    with open(path, "w") as fh:
        fh.write("tet,patch_members...\n")
        for t, p in enumerate(patches):
            fh.write(f"{t}," + ",".join(str(int(c)) for c in p) + "\n")


__all__ = [
    "EdgeAssignment", "LinearOnEdge", "MacroLagrangeSplit", "select_sigma", "validate_assignment",
    "dual_weight", "edge_projection", "dual_values", "apply_Dh", "lagrange_interpolate",
    "macro_lagrange_split", "build_patches", "patch_overlap", "write_sigma_csv",
    "write_patch_csv", "INTERIOR", "ALL_PLANES",
]
