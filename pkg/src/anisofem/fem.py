"""P1 finite elements for the Poisson problem with homogeneous Dirichlet data.

Assembly is vectorised over elements and done in chunks so that meshes
with a few million tetrahedra fit in memory.  Besides the solver the
module provides error norms against analytic or fine-mesh references, a
residual error estimator and weighted Sobolev norms evaluated by dyadic
refinement towards the singular set.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .quadrature import tet_rule, tet_volumes, triangle_rule, vertex_collapsed_points

CHUNK = 200_000


class SolverError(RuntimeError):
    """Raised when the linear solver misses its tolerance."""


@dataclass
class SparseSystem:
    stiffness: csr_matrix  # full matrix, before elimination
    load: np.ndarray  # full load vector
    constrained: np.ndarray  # boolean mask of Dirichlet nodes
    values: np.ndarray  # Dirichlet values on all nodes (zero elsewhere)

    @property
    def free(self):
        return np.flatnonzero(~self.constrained)

    def reduced(self):
        """Matrix and right-hand side after symmetric elimination."""
        free = self.free
        k = self.stiffness
        a = k[free][:, free]
        rhs = self.load[free] - k[free] @ self.values
        return a.tocsr(), rhs


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual: float


# ----------------------------------------------------------------------------
# assembly


def boundary_nodes(mesh):
    faces, counts = mesh.faces()
    return np.unique(faces[counts == 1])


def _local_stiffness(verts):
    d = verts[:, 1:] - verts[:, :1]
    det = np.linalg.det(d)
    if np.any(np.abs(det) < 1e-300):
        raise ValueError("degenerate element volume")
    inv = np.linalg.inv(d)
    g = np.empty((len(verts), 4, 3))
    g[:, 1:] = inv.swapaxes(1, 2)
    g[:, 0] = -g[:, 1:].sum(axis=1)
    vol = np.abs(det) / 6.0
    return np.einsum("mid,mjd->mij", g, g) * vol[:, None, None]


def _scatter(tets, local, n):
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    return coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def stiffness_matrix(mesh, chunk=CHUNK):
    n = mesh.n_nodes
    k = csr_matrix((n, n))
    for s in range(0, mesh.n_tets, chunk):
        t = mesh.tets[s:s + chunk]
        k = k + _scatter(t, _local_stiffness(mesh.nodes[t]), n)
    k.sum_duplicates()
    return k


def mass_matrix(mesh, chunk=CHUNK):
    n = mesh.n_nodes
    m = csr_matrix((n, n))
    ref = (np.ones((4, 4)) + np.eye(4)) / 20.0
    for s in range(0, mesh.n_tets, chunk):
        t = mesh.tets[s:s + chunk]
        vol = np.abs(tet_volumes(mesh.nodes[t]))
        m = m + _scatter(t, vol[:, None, None] * ref, n)
    return m


def singular_points_of(macros):
    """Singular vertices of the macro decomposition (deduplicated)."""
    pts = [m.vertices[m.singular_vertex] for m in macros if m.singular_vertex is not None]
    if not pts:
        return np.zeros((0, 3))
    return np.unique(np.round(np.array(pts), 12), axis=0)


def _touching(mesh, points, tol=1e-12):
    """Per tet: local index of a vertex located at one of ``points`` (or -1)."""
    out = np.full(mesh.n_tets, -1)
    if len(points) == 0:
        return out
    tree = cKDTree(points)
    d, _ = tree.query(mesh.nodes)
    hit = d < tol
    flags = hit[mesh.tets]
    has = flags.any(axis=1)
    out[has] = np.argmax(flags[has], axis=1)
    return out


def _rotate_to_front(tets, k):
    """Reorder each tet so that local vertex ``k`` comes first (keeps orientation irrelevant)."""
    idx = (np.arange(4)[None, :] + k[:, None]) % 4
    return np.take_along_axis(tets, idx, axis=1)


def load_vector(mesh, f, singular_points=None, degree=5, chunk=CHUNK):
    """``int f phi_i`` with a vertex-collapsed rule on elements touching singular points."""
    if singular_points is None:
        singular_points = singular_points_of(mesh.macros)
    rule = tet_rule(degree)
    b = np.zeros(mesh.n_nodes)
    touch = _touching(mesh, np.asarray(singular_points, float).reshape(-1, 3))
    regular = np.flatnonzero(touch < 0)
    for s in range(0, len(regular), chunk):
        t = mesh.tets[regular[s:s + chunk]]
        v = mesh.nodes[t]
        vol = np.abs(tet_volumes(v))
        pts = np.einsum("qk,mkd->mqd", rule.points, v)
        fv = np.asarray(f(pts.reshape(-1, 3))).reshape(len(t), -1)
        contrib = np.einsum("mq,q,qk->mk", fv, rule.weights, rule.points) * vol[:, None]
        np.add.at(b, t.ravel(), contrib.ravel())
    special = np.flatnonzero(touch >= 0)
    if len(special):
        t = _rotate_to_front(mesh.tets[special], touch[special])
        pts, w, bary = vertex_collapsed_points(mesh.nodes[t])
        fv = np.asarray(f(pts.reshape(-1, 3))).reshape(len(t), -1)
        contrib = np.einsum("mq,mq,qk->mk", fv, w, bary)
        np.add.at(b, t.ravel(), contrib.ravel())
    return b


def assemble(mesh, f, dirichlet=None, singular_points=None, degree=5):
    """Stiffness matrix, load vector and Dirichlet constraints on the mesh boundary.

    ``dirichlet`` optionally gives boundary values as a function of position
    (homogeneous data by default).
    """
    k = stiffness_matrix(mesh)
    if f is None:
        b = np.zeros(mesh.n_nodes)
    else:
        b = load_vector(mesh, f, singular_points, degree)
    mask = np.zeros(mesh.n_nodes, dtype=bool)
    bnd = boundary_nodes(mesh)
    mask[bnd] = True
    values = np.zeros(mesh.n_nodes)
    if dirichlet is not None:
        values[bnd] = dirichlet(mesh.nodes[bnd])
    return SparseSystem(k, b, mask, values)


# ----------------------------------------------------------------------------
# solver


def solve(system, tol=1e-10, x0=None, maxiter=50_000, matrix=None):
    """Jacobi-preconditioned conjugate gradients on the reduced system.

    ``matrix`` may pass a precomputed reduced matrix to reuse it between
    solves with the same stiffness.
    """
    if matrix is None:
        a, rhs = system.reduced()
    else:
        a = matrix
        rhs = system.load[system.free] - system.stiffness[system.free] @ system.values
    u = system.values.copy()
    if a.shape[0] == 0:
        return SolveResult(u, 0, 0.0)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return SolveResult(u, 0, 0.0)
    prec = diags(1.0 / a.diagonal())
    count = [0]

    def tick(_):
        count[0] += 1

    start = None if x0 is None else np.asarray(x0)[system.free]
    # the recursive CG residual drifts from the true one; aim below tol
    x, info = cg(a, rhs, x0=start, rtol=0.5 * tol, atol=0.0, maxiter=maxiter, M=prec, callback=tick)
    res = np.linalg.norm(rhs - a @ x) / bnorm
    if info != 0 or res > tol:
        raise SolverError(f"CG stopped after {count[0]} iterations with relative residual {res:.3e}")
    u[system.free] = x
    return SolveResult(u, count[0], res)


def solve_poisson(mesh, f, tol=1e-10, singular_points=None, x0=None):
    system = assemble(mesh, f, singular_points=singular_points)
    return system, solve(system, tol, x0=x0)


# ----------------------------------------------------------------------------
# norms and errors


def element_gradients(mesh, u, idx=None):
    t = mesh.tets if idx is None else mesh.tets[idx]
    v = mesh.nodes[t]
    d = v[:, 1:] - v[:, :1]
    inv = np.linalg.inv(d)
    du = u[t[:, 1:]] - u[t[:, :1]]
    return np.einsum("mij,mj->mi", inv, du)


def fe_norms(mesh, u):
    """``(|u|_H1, ||u||_L2)`` of a P1 function."""
    k = stiffness_matrix(mesh)
    m = mass_matrix(mesh)
    return math.sqrt(max(u @ (k @ u), 0.0)), math.sqrt(max(u @ (m @ u), 0.0))


class PointLocator:
    """Locate points in a tetrahedral mesh.

    Starts from the element with the nearest centroid and walks across
    faces towards the point; stragglers are resolved by testing the
    nearest few dozen elements and finally by brute force.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        v = mesh.nodes[mesh.tets]
        self.v0 = v[:, 0]
        self.inv = np.linalg.inv(v[:, 1:] - v[:, :1])  # maps x - v0 to (l1, l2, l3)
        self.tree = cKDTree(v.mean(axis=1))
        self.neighbors = _face_neighbors(mesh.tets)

    def bary(self, x, t):
        lam = np.einsum("mij,mi->mj", self.inv[t], x - self.v0[t])
        return np.column_stack([1 - lam.sum(axis=1), lam])

    def locate(self, x, tol=1e-9, max_steps=60):
        x = np.atleast_2d(x)
        _, t = self.tree.query(x)
        t = np.asarray(t)
        active = np.arange(len(x))
        for _ in range(max_steps):
            if len(active) == 0:
                break
            b = self.bary(x[active], t[active])
            worst = np.argmin(b, axis=1)
            inside = b[np.arange(len(active)), worst] >= -tol
            mv = ~inside
            nxt = self.neighbors[t[active[mv]], worst[mv]]
            stuck = nxt < 0
            moved = active[mv][~stuck]
            t[moved] = nxt[~stuck]
            active = moved
        left = np.flatnonzero(np.min(self.bary(x, t), axis=1) < -tol)
        if len(left):
            k = min(64, self.mesh.n_tets)
            _, cand = self.tree.query(x[left], k=k)
            cand = np.asarray(cand).reshape(len(left), -1)
            found = np.zeros(len(left), dtype=bool)
            for j in range(cand.shape[1]):
                todo = np.flatnonzero(~found)
                if len(todo) == 0:
                    break
                b = self.bary(x[left[todo]], cand[todo, j])
                ok = b.min(axis=1) >= -tol
                t[left[todo[ok]]] = cand[todo[ok], j]
                found[todo[ok]] = True
            for i in np.flatnonzero(~found):
                p = x[left[i]]
                b = self.bary(np.repeat(p[None], self.mesh.n_tets, 0), np.arange(self.mesh.n_tets))
                best = int(np.argmax(b.min(axis=1)))
                if b[best].min() < -1e-6:
                    raise ValueError(f"point {p} lies outside the mesh")
                t[left[i]] = best
        return t, self.bary(x, t)


def _face_neighbors(tets):
    m = len(tets)
    faces = tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3)
    faces = np.sort(faces, axis=1)
    owner = np.repeat(np.arange(m), 4)
    local = np.tile(np.arange(4), m)
    order = np.lexsort(faces.T[::-1])
    fs = faces[order]
    same = np.all(fs[1:] == fs[:-1], axis=1)
    nb = np.full((m, 4), -1)
    i = np.flatnonzero(same)
    a, b = order[i], order[i + 1]
    nb[owner[a], local[a]] = owner[b]
    nb[owner[b], local[b]] = owner[a]
    return nb


def error_norms(mesh, u, reference, degree=2, chunk=CHUNK, locator=None):
    """H1-seminorm and L2 errors of the P1 function ``u`` on ``mesh``.

    ``reference`` is either ``(fine_mesh, u_fine)``, in which case the error
    is integrated elementwise on the fine mesh, or a
    :class:`~anisofem.functions.ModelFunction` with value and gradient.
    """
    rule = tet_rule(degree)
    h1 = l2 = 0.0
    if isinstance(reference, tuple):
        fine, uf = reference
        loc = locator if locator is not None else PointLocator(mesh)
        gc = element_gradients(mesh, u)
        for s in range(0, fine.n_tets, chunk):
            t = fine.tets[s:s + chunk]
            v = fine.nodes[t]
            vol = np.abs(tet_volumes(v))
            gf = element_gradients(fine, uf, np.arange(s, s + len(t)))
            pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
            ct, cb = loc.locate(pts)
            uc = np.einsum("pk,pk->p", cb, u[mesh.tets[ct]]).reshape(len(t), -1)
            ufv = uf[t] @ rule.points.T
            dg = gc[ct].reshape(len(t), -1, 3) - gf[:, None, :]
            h1 += float(np.sum(vol * (np.sum(dg**2, axis=2) @ rule.weights)))
            l2 += float(np.sum(vol * (((uc - ufv) ** 2) @ rule.weights)))
    else:
        rule = tet_rule(max(degree, 4))
        g = element_gradients(mesh, u)
        for s in range(0, mesh.n_tets, chunk):
            t = mesh.tets[s:s + chunk]
            v = mesh.nodes[t]
            vol = np.abs(tet_volumes(v))
            pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
            ex = reference.value(pts).reshape(len(t), -1)
            exg = reference.grad(pts).reshape(len(t), -1, 3)
            uh = u[t] @ rule.points.T
            dg = exg - g[s:s + len(t)][:, None, :]
            h1 += float(np.sum(vol * (np.sum(dg**2, axis=2) @ rule.weights)))
            l2 += float(np.sum(vol * (((ex - uh) ** 2) @ rule.weights)))
    return math.sqrt(h1), math.sqrt(l2)


# ----------------------------------------------------------------------------
# a posteriori estimator


@dataclass
class EstimatorResult:
    element: np.ndarray  # squared indicators
    total: float


def residual_estimate(mesh, u, f, singular_points=None, sizes=None):
    """Residual estimator ``h_T^2 ||f||_T^2 + sum_F h_F ||[d_n u]||_F^2``.

    Face jumps are shared equally by the two elements of an interior face.
    """
    from .mesh import all_element_sizes

    if singular_points is None:
        singular_points = singular_points_of(mesh.macros)
    ht = (all_element_sizes(mesh)[:, 3] if sizes is None else sizes)
    f2 = _element_l2_squared(mesh, f, singular_points)
    eta = ht**2 * f2
    g = element_gradients(mesh, u)
    nb = _face_neighbors(mesh.tets)
    local_faces = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]
    for k, lf in enumerate(local_faces):
        other = nb[:, k]
        sel = np.flatnonzero(other >= 0)
        fv = mesh.nodes[mesh.tets[sel][:, lf]]
        nrm = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
        area = 0.5 * np.linalg.norm(nrm, axis=1)
        nrm /= (2 * area)[:, None]
        jump = np.einsum("md,md->m", g[sel] - g[other[sel]], nrm)
        hf = np.max(np.linalg.norm(fv - np.roll(fv, 1, axis=1), axis=2), axis=1)
        # each interior face is visited from both sides: half per visit
        eta[sel] += 0.5 * hf * jump**2 * area
    return EstimatorResult(eta, math.sqrt(float(eta.sum())))


def _element_l2_squared(mesh, f, singular_points, degree=5):
    rule = tet_rule(degree)
    out = np.zeros(mesh.n_tets)
    touch = _touching(mesh, np.asarray(singular_points, float).reshape(-1, 3))
    reg = np.flatnonzero(touch < 0)
    for s in range(0, len(reg), CHUNK):
        idx = reg[s:s + CHUNK]
        v = mesh.nodes[mesh.tets[idx]]
        vol = np.abs(tet_volumes(v))
        pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
        fv = np.asarray(f(pts)).reshape(len(idx), -1)
        out[idx] = vol * ((fv**2) @ rule.weights)
    sp = np.flatnonzero(touch >= 0)
    if len(sp):
        t = _rotate_to_front(mesh.tets[sp], touch[sp])
        pts, w, _ = vertex_collapsed_points(mesh.nodes[t])
        fv = np.asarray(f(pts.reshape(-1, 3))).reshape(len(sp), -1)
        out[sp] = np.sum(w * fv**2, axis=1)
    return out


# ----------------------------------------------------------------------------
# weighted norms


class DivergenceError(ArithmeticError):
    """The weighted integral grows without bound under refinement."""


_RED_CHILDREN = np.array([
    [0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3],
    [4, 5, 6, 8], [4, 5, 7, 8], [5, 6, 8, 9], [5, 7, 8, 9],
])
_MIDPOINTS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def red_refine(verts):
    """Split each tetrahedron (m, 4, 3) into eight children (8m, 4, 3)."""
    mids = np.stack([(verts[:, a] + verts[:, b]) / 2 for a, b in _MIDPOINTS], axis=1)
    allv = np.concatenate([verts, mids], axis=1)
    return allv[:, _RED_CHILDREN].reshape(-1, 4, verts.shape[-1])


@dataclass
class WeightedNormSpec:
    k: int
    beta: float
    delta: float

    def __post_init__(self):
        if self.k not in (0, 1, 2):
            raise ValueError("k must be 0, 1 or 2")
        if not (math.isfinite(self.beta) and math.isfinite(self.delta)):
            raise ValueError("weight exponents must be finite")


def _weighted_integrand(func, spec, frame):
    origin, q = frame

    def integrand(x):
        y = (x - origin) @ q
        big_r = np.linalg.norm(y, axis=1)
        r = np.linalg.norm(y[:, :2], axis=1)
        theta = r / big_r
        total = np.zeros(len(x))
        derivs = [lambda z: func.value(z) ** 2,
                  lambda z: np.sum((func.grad(z) @ q) ** 2, axis=1),
                  lambda z: _hess_multiindex_sq(func.hess(z), q)]
        for j in range(spec.k + 1):
            w = big_r ** (spec.beta - spec.k + j) * theta ** (spec.delta - spec.k + j)
            total += w**2 * derivs[j](x)
        return total

    return integrand


def _hess_multiindex_sq(h, q):
    hl = np.einsum("ji,mjk,kl->mil", q, h, q)
    diag = np.einsum("mii->mi", hl)
    iu = np.triu_indices(3, 1)
    return np.sum(diag**2, axis=1) + np.sum(hl[:, iu[0], iu[1]] ** 2, axis=1)


def refined_integrals(integrand, verts, frame, depth=8, degree=5, tol=1e-10, with_parent=False):
    """Integrate ``integrand`` over each tet with dyadic refinement towards
    the third axis of ``frame`` (which contains its origin).

    With ``with_parent`` the integrand is called as ``integrand(x, parent)``
    where ``parent`` holds the index of the original tet of every point.

    Returns ``(per_tet, history)`` where ``history[l]`` is the total after
    ``l`` refinement levels; ``per_tet`` is extrapolated geometrically.
    """
    origin, q = frame
    rule = tet_rule(degree)
    verts = np.asarray(verts, float)
    m = len(verts)
    scale = max(1.0, float(np.abs(verts - origin).max()))

    def on_axis(v):
        y = (v - origin) @ q
        return np.any(np.linalg.norm(y[..., :2], axis=-1) < tol * scale, axis=1)

    def rule_integral(v, par):
        vol = np.abs(tet_volumes(v))
        pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
        if with_parent:
            vals = integrand(pts, np.repeat(par, len(rule.weights)))
        else:
            vals = integrand(pts)
        return vol * (np.asarray(vals).reshape(len(v), -1) @ rule.weights)

    def cold_integral(v, par, level):
        # coarse tets away from the axis are subdivided down to level 3
        # before the degree-5 rule is applied
        extra = max(0, 3 - level)
        if extra == 0:
            return v, par
        for _ in range(extra):
            v = red_refine(v)
        return v, np.repeat(par, 8**extra)

    final = np.zeros(m)
    parent = np.arange(m)
    cur = verts
    history, per_level = [], []
    for level in range(depth + 1):
        hot = on_axis(cur)
        cold = ~hot
        if cold.any():
            cv, cp = cold_integral(cur[cold], parent[cold], level)
            np.add.at(final, cp, rule_integral(cv, cp))
        hot_vals = np.zeros(m)
        if hot.any():
            np.add.at(hot_vals, parent[hot], rule_integral(cur[hot], parent[hot]))
        per_level.append(final + hot_vals)
        history.append(float(np.sum(final + hot_vals)))
        if not hot.any() or level == depth:
            break
        cur = red_refine(cur[hot])
        parent = np.repeat(parent[hot], 8)
    per_tet = per_level[-1].copy()
    if len(per_level) >= 3:
        d1 = per_level[-2] - per_level[-3]
        d2 = per_level[-1] - per_level[-2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(np.abs(d1) > 0, d2 / d1, 0.0)
        ratio = np.clip(ratio, 0.0, 0.95)
        per_tet = per_tet + d2 * ratio / (1 - ratio)
    return per_tet, history


def check_divergence(history, rel=1e-6, growth=0.98):
    """Raise :class:`DivergenceError` if the refinement increments do not decay."""
    if len(history) < 4:
        return
    d = np.abs(np.diff(history))
    last = history[-1]
    if d[-1] <= rel * abs(last):
        return
    ratios = d[-3:][1:] / np.maximum(d[-3:][:-1], 1e-300)
    if np.all(ratios >= growth):
        raise DivergenceError(
            f"weighted integral does not converge under refinement (increment ratios {ratios})")


def weighted_norm(func, macro, spec, depth=10, verts=None, frame=None):
    """``||func||_{V^{k,2}_{beta,delta}}`` over ``macro`` (or over ``verts``).

    ``R`` and ``theta = r / R`` are measured in the macro's local frame.
    Non-integrable weights are detected from the refinement history.
    """
    frame = macro.local_frame() if frame is None else frame
    verts = macro.vertices[None] if verts is None else verts
    integrand = _weighted_integrand(func, spec, frame)
    per_tet, history = refined_integrals(integrand, verts, frame, depth=depth)
    check_divergence(history)
    return math.sqrt(max(float(per_tet.sum()), 0.0))


def weighted_element_integrals(func, verts, frame, spec, depth=8):
    """Squared weighted norms per tet, for assembling patch norms."""
    integrand = _weighted_integrand(func, spec, frame)
    per_tet, history = refined_integrals(integrand, verts, frame, depth=depth)
    check_divergence(history)
    return per_tet


def eoc(errors, hs):
    """Pairwise orders ``log(e_i/e_{i+1}) / log(h_i/h_{i+1})``."""
    e = np.asarray(errors, float)
    h = np.asarray(hs, float)
    return np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])


def fitted_order(errors, hs):
    """Least-squares slope of ``log e`` against ``log h``."""
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
