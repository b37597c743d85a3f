"""Numerical checks of the local interpolation estimates and trace inequalities.

Every check reports ratios ``LHS / RHS`` of an estimate over a family of
meshes or geometries.  An estimate is considered confirmed when the
ratios stay bounded: the largest ratio over the family is at most twice
the ratio on the coarsest member.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .fem import (WeightedNormSpec, _weighted_integrand, check_divergence, element_gradients,
                  refined_integrals)
from .functions import edge_singular, polynomial_xyz, square_x1, vertex_singular
from .interpolation import apply_Dh, build_patches, lagrange_interpolate, macro_lagrange_split, select_sigma
from .mesh import (FICHERA_LAMBDA_E, FICHERA_LAMBDA_V, MacroKind, all_element_sizes,
                   build_fichera_macros, build_mesh, classify_nodes)
from .quadrature import tet_rule, tet_volumes, triangle_rule

BETA_VERTEX = 0.3
DELTA_EDGE = 0.4
CASES = (1, 2, 3, 4, 5, 6, 7)


@dataclass
class RatioReport:
    case: int
    levels: list
    max_ratio: list  # per level, nan when the level has no element of this case
    samples: list = field(default_factory=list)  # (n, element, lhs, rhs, ratio)

    @property
    def coarsest(self):
        vals = [r for r in self.max_ratio if np.isfinite(r)]
        return vals[0] if vals else math.nan

    @property
    def overall(self):
        vals = [r for r in self.max_ratio if np.isfinite(r)]
        return max(vals) if vals else math.nan

    @property
    def bounded(self):
        return bool(np.isfinite(self.coarsest) and self.overall <= 2.0 * self.coarsest)

    def csv_rows(self):
        return [f"{self.case},{n},{t},{lhs:.12g},{rhs:.12g},{ratio:.12g}"
                for n, t, lhs, rhs, ratio in self.samples]


# ----------------------------------------------------------------------------
# level data


@dataclass
class LevelData:
    n: int
    mesh: object
    classification: object
    assignment: object
    patches: list
    sizes: np.ndarray


def level_data(n, mu=0.5, nu=0.5):
    macros = build_fichera_macros(mu, nu)
    mesh = build_mesh(macros, n)
    cls = classify_nodes(mesh)
    asg = select_sigma(mesh, cls)
    patches = build_patches(mesh, asg)
    return LevelData(n, mesh, cls, asg, patches, all_element_sizes(mesh))


def _edge_macros(mesh, axis=2):
    """Anisotropic macros whose singular edge runs along the positive ``axis``."""
    out = []
    for idx, m in enumerate(mesh.macros):
        if m.anisotropic:
            d = m.vertices[1] - m.vertices[0]
            if np.allclose(d / np.linalg.norm(d), np.eye(3)[axis]):
                out.append(idx)
    return out


def _vertex_macros(mesh):
    return [idx for idx, m in enumerate(mesh.macros) if m.kind == MacroKind.TYPE2]


def select_case_elements(data, case):
    """Element indices realising one of the seven local configurations."""
    mesh, cls, sizes = data.mesh, data.classification, data.sizes
    excluded = cls.excluded[mesh.tets].any(axis=1)
    singular = (cls.flags[mesh.tets] == 3).any(axis=1)
    at_origin = (np.linalg.norm(mesh.nodes[mesh.tets], axis=2) < 1e-12).any(axis=1)
    iso = np.isin(mesh.macro_of, _vertex_macros(mesh))
    edge = np.isin(mesh.macro_of, _edge_macros(mesh))
    h1, h3 = sizes[:, 0], sizes[:, 2]
    flat = edge & (h3 <= h1)
    needle = edge & (h1 < h3)
    masks = {
        1: iso & ~excluded,
        2: iso & excluded,
        3: iso & at_origin,
        4: flat & ~excluded,
        5: flat & excluded & ~singular,
        6: needle & ~excluded,
        7: edge & singular,
    }
    return np.flatnonzero(masks[case])


def case_function(case, mesh):
    """Model function per case (a single global function on the domain)."""
    if case in (1, 2):
        return polynomial_xyz()
    if case == 3:
        return vertex_singular(FICHERA_LAMBDA_V)
    if case in (4, 5, 6):
        return square_x1()
    frame = mesh.macros[_edge_macros(mesh)[0]].local_frame()
    return edge_singular(FICHERA_LAMBDA_E, frame)


def remainder_function(u, macros):
    """``u_R = u - u_I`` with the macro-wise linear interpolant ``u_I``."""
    split = macro_lagrange_split(u, macros)
    return u.minus_affine(lambda x: split.coeffs[split.locate(x)]), split


def _patch_sum(values, patch):
    return float(np.sum(values[patch]))


def _smooth_h1_errors(mesh, elems, ur, coef, degree=5):
    rule = tet_rule(degree)
    v = mesh.nodes[mesh.tets[elems]]
    vol = np.abs(tet_volumes(v))
    g = element_gradients(mesh, coef, elems)
    pts = np.einsum("qk,mkd->mqd", rule.points, v)
    gu = _grad_with_macro(ur, pts.reshape(-1, 3), np.repeat(mesh.macro_of[elems], len(rule.weights)))
    dg = gu.reshape(len(elems), -1, 3) - g[:, None, :]
    return vol * (np.sum(dg**2, axis=2) @ rule.weights)


def _grad_with_macro(ur_pair, x, macro_ids):
    u, split = ur_pair
    return u.grad(x) - split.coeffs[macro_ids][:, 1:]


def _singular_h1_errors(mesh, elems, ur_pair, coef, depth=8):
    """``|u_R - D_h u_R|^2_{H1(T)}`` with refinement towards the singular set."""
    g = element_gradients(mesh, coef, elems)
    out = np.zeros(len(elems))
    for idx in np.unique(mesh.macro_of[elems]):
        sel = np.flatnonzero(mesh.macro_of[elems] == idx)
        frame = mesh.macros[idx].local_frame()
        gs = g[sel]

        def integrand(x, parent, gs=gs, idx=idx):
            d = _grad_with_macro(ur_pair, x, np.full(len(x), idx)) - gs[parent]
            return np.sum(d**2, axis=1)

        vals, _ = refined_integrals(integrand, mesh.nodes[mesh.tets[elems[sel]]], frame,
                                    depth=depth, with_parent=True)
        out[sel] = vals
    return out


def _h2_seminorm_sq(mesh, tets, u, degree=5):
    rule = tet_rule(degree)
    v = mesh.nodes[mesh.tets[tets]]
    vol = np.abs(tet_volumes(v))
    pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
    h = u.hess(pts)
    diag = np.einsum("mii->mi", h)
    iu = np.triu_indices(3, 1)
    val = np.sum(diag**2, axis=1) + np.sum(h[:, iu[0], iu[1]] ** 2, axis=1)
    return vol * (val.reshape(len(tets), -1) @ rule.weights)


def _directional_h1_sq(mesh, tets, u, direction, degree=5):
    """``|d_dir u|^2_{H1}`` per tet for a smooth ``u``."""
    rule = tet_rule(degree)
    v = mesh.nodes[mesh.tets[tets]]
    vol = np.abs(tet_volumes(v))
    pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
    hd = u.hess(pts) @ direction
    return vol * (np.sum(hd**2, axis=1).reshape(len(tets), -1) @ rule.weights)


def _weighted_per_tet(mesh, tets, func, spec, depth=8):
    out = np.zeros(len(tets))
    for idx in np.unique(mesh.macro_of[tets]):
        sel = np.flatnonzero(mesh.macro_of[tets] == idx)
        frame = mesh.macros[idx].local_frame()
        integrand = _weighted_integrand(func, spec, frame)
        vals, hist = refined_integrals(integrand, mesh.nodes[mesh.tets[tets[sel]]], frame, depth=depth)
        check_divergence(hist)
        out[sel] = vals
    return out


def local_interp_ratio(case, levels=(2, 4, 8), mu=0.5, nu=0.5, data=None):
    """Per-element ratios of the interpolation error to the case's bound.

    ``data`` may supply prebuilt :class:`LevelData` objects keyed by level.
    """
    if case not in CASES:
        raise ValueError(f"case must be one of {CASES}")
    report = RatioReport(case, list(levels), [])
    for n in levels:
        d = data[n] if data is not None and n in data else level_data(n, mu, nu)
        mesh = d.mesh
        elems = select_case_elements(d, case)
        if len(elems) == 0:
            report.max_ratio.append(math.nan)
            continue
        u = case_function(case, mesh)
        ur, split = remainder_function(u, mesh.macros)
        coef = apply_Dh(ur, mesh, d.assignment)
        if case in (3, 7):
            lhs2 = _singular_h1_errors(mesh, elems, (u, split), coef)
        else:
            lhs2 = _smooth_h1_errors(mesh, elems, (u, split), coef)
        support = np.unique(np.concatenate([d.patches[t] for t in elems]))
        pos = np.full(mesh.n_tets, -1)
        pos[support] = np.arange(len(support))
        rhs = np.zeros(len(elems))
        h1, h3, ht = d.sizes[elems, 0], d.sizes[elems, 2], d.sizes[elems, 3]
        if case in (1, 2, 4, 5):
            per = _h2_seminorm_sq(mesh, support, u)
            rhs = ht * np.sqrt([_patch_sum(per, pos[d.patches[t]]) for t in elems])
        elif case == 6:
            q = mesh.macros[mesh.macro_of[elems[0]]].local_frame()[1]
            parts = [_directional_h1_sq(mesh, support, u, q[:, i]) for i in range(3)]
            hs = [h1, d.sizes[elems, 1], h3]
            rhs = sum(hs[i] * np.sqrt([_patch_sum(parts[i], pos[d.patches[t]]) for t in elems])
                      for i in range(3))
        elif case == 3:
            spec = WeightedNormSpec(2, BETA_VERTEX, 0.0)
            urf = u.minus_affine(lambda x: split.coeffs[split.locate(x)])
            per = _weighted_per_tet(mesh, support, urf, spec)
            rhs = ht ** (1 - BETA_VERTEX) * np.sqrt([_patch_sum(per, pos[d.patches[t]]) for t in elems])
        else:
            q = mesh.macros[mesh.macro_of[elems[0]]].local_frame()[1]
            spec_d = WeightedNormSpec(1, DELTA_EDGE, DELTA_EDGE)
            spec_0 = WeightedNormSpec(1, 0.0, 0.0)
            p1 = _weighted_per_tet(mesh, support, u.partial(0, q), spec_d)
            p2 = _weighted_per_tet(mesh, support, u.partial(1, q), spec_d)
            p3 = _weighted_per_tet(mesh, support, u.partial(2, q), spec_0)
            s12 = np.array([math.sqrt(_patch_sum(p1, pos[d.patches[t]]))
                            + math.sqrt(_patch_sum(p2, pos[d.patches[t]])) for t in elems])
            s3 = np.sqrt([_patch_sum(p3, pos[d.patches[t]]) for t in elems])
            rhs = h1 ** (1 - DELTA_EDGE) * s12 + h3 * s3
        lhs = np.sqrt(np.maximum(lhs2, 0.0))
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0)
        if np.any(rhs <= 0) and np.any(lhs[rhs <= 0] > 1e-12):
            raise ArithmeticError(f"case {case}: vanishing bound with nonzero error")
        report.max_ratio.append(float(ratio.max()))
        report.samples.extend(zip([n] * len(elems), elems.tolist(), lhs.tolist(), rhs.tolist(),
                                  ratio.tolist()))
    return report


@dataclass
class LagrangeComparison:
    anisotropy: np.ndarray
    lagrange_ratio: np.ndarray
    dh_ratio: np.ndarray
    slope: float  # of the Lagrange ratio
    relative_slope: float  # of |u - I_h u| / |u - D_h u|


def lagrange_needle_comparison(levels=(2, 4, 8), mu=0.5, nu=0.5, data=None):
    """Ratios ``|u - I_h u|_{H1(T)} / (h_T |u|_{H2(T)})`` on needle elements.

    Uses the case-6 elements and ``u = x1**2``; the slope is the least-squares
    slope of ``log ratio`` against ``log(h3/h1)``.
    """
    aniso, lag, dh = [], [], []
    for n in levels:
        d = data[n] if data is not None and n in data else level_data(n, mu, nu)
        mesh = d.mesh
        elems = select_case_elements(d, 6)
        if len(elems) == 0:
            continue
        u = square_x1()
        ur, split = remainder_function(u, mesh.macros)
        c_lag = lagrange_interpolate(ur, mesh)
        c_dh = apply_Dh(ur, mesh, d.assignment)
        e_lag = np.sqrt(_smooth_h1_errors(mesh, elems, (u, split), c_lag))
        e_dh = np.sqrt(_smooth_h1_errors(mesh, elems, (u, split), c_dh))
        bound = d.sizes[elems, 3] * np.sqrt(_h2_seminorm_sq(mesh, elems, u))
        aniso.append(d.sizes[elems, 2] / d.sizes[elems, 0])
        lag.append(e_lag / bound)
        dh.append(e_dh / bound)
    a, rl, rd = np.concatenate(aniso), np.concatenate(lag), np.concatenate(dh)
    keep = rl > 0
    slope = float(np.polyfit(np.log(a[keep]), np.log(rl[keep]), 1)[0])
    keep &= rd > 0
    rel = float(np.polyfit(np.log(a[keep]), np.log(rl[keep] / rd[keep]), 1)[0])
    return LagrangeComparison(a, rl, rd, slope, rel)


# ----------------------------------------------------------------------------
# trace inequalities


@dataclass
class Prism:
    vertices: np.ndarray  # (6, 3); v1v4, v2v5, v3v6 parallel to x3

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(6, 3)
        for a in range(3):
            e = self.vertices[a + 3] - self.vertices[a]
            if np.linalg.norm(e[:2]) > 1e-12 * max(1.0, np.linalg.norm(e)):
                raise ValueError("vertical prism edges must be parallel to the x3 axis")
        if self.volume <= 0:
            raise ValueError("degenerate prism")

    def tets(self):
        v = self.vertices
        return np.array([v[[0, 1, 2, 3]], v[[1, 2, 3, 4]], v[[2, 3, 4, 5]]])

    @property
    def volume(self):
        return float(np.sum(np.abs(tet_volumes(self.tets()))))

    @property
    def h3(self):
        return float(np.max(self.vertices[3:, 2] - self.vertices[:3, 2]))


def _tri_integral(tri, func, degree=4):
    rule = triangle_rule(degree)
    pts = rule.points @ tri
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    return area * float(rule.weights @ func(pts))


def _tets_integral(tets, func, degree=5):
    rule = tet_rule(degree)
    vol = np.abs(tet_volumes(tets))
    pts = np.einsum("qk,mkd->mqd", rule.points, tets).reshape(-1, 3)
    return float(np.sum(vol * (func(pts).reshape(len(tets), -1) @ rule.weights)))


def _subdivided(tets, levels):
    from .fem import red_refine

    for _ in range(levels):
        tets = red_refine(tets)
    return tets


def prism_trace_ratio(prism, v, p=2.0, refine=2):
    """``||v||_{L^p(F)}^p / (h3^{-1} (||v||_{L^p(P)}^p + h3^p ||d3 v||_{L^p(P)}^p))``."""
    face = prism.vertices[:3]
    lhs = _tri_integral(face, lambda x: np.abs(v.value(x)) ** p)
    tets = _subdivided(prism.tets(), refine)
    vol_part = _tets_integral(tets, lambda x: np.abs(v.value(x)) ** p)
    d3_part = _tets_integral(tets, lambda x: np.abs(v.grad(x)[:, 2]) ** p)
    h3 = prism.h3
    return lhs / (h3**-1 * (vol_part + h3**p * d3_part))


def right_prism(base, h3, tilt=0.0):
    """Prism over triangle ``base`` (3, 2) with vertical edges of length ``h3``.

    ``tilt`` rotates the bottom face about the x1 axis by that angle while
    keeping the top face horizontal (vertical edges stay vertical).
    """
    base = np.asarray(base, float)
    z0 = np.tan(tilt) * base[:, 1]
    bottom = np.column_stack([base, z0])
    top = np.column_stack([base, np.full(3, z0.max() + h3)])
    return Prism(np.vstack([bottom, top]))


@dataclass
class PatchTraceSample:
    element: int
    node: int
    area_ratio: float  # |P_n| / |F_n|
    ratio: float


def patch_trace_samples(data, v, macro_ids=None):
    """Trace ratios on anisotropic patches touching the singular edge.

    For each such element ``T`` and each vertex ``n`` of ``T`` on the
    singular edge, ``sigma`` is the shortest edge of ``T`` at ``n`` that is
    not parallel to the singular edge.  ``F_n`` is the lateral face of the
    strip of ``T`` spanned by ``sigma`` and ``P_n`` the largest
    parallelogram in ``F_n`` with ``sigma`` as an edge.
    """
    mesh, cls = data.mesh, data.classification
    macro_ids = [i for i, m in enumerate(mesh.macros) if m.anisotropic] if macro_ids is None else macro_ids
    out = []
    on_edge = cls.flags == 3
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    for t in np.flatnonzero(np.isin(mesh.macro_of, macro_ids) & on_edge[mesh.tets].any(axis=1)):
        idx = int(mesh.macro_of[t])
        macro = mesh.macros[idx]
        fam = mesh.plane_families[idx]
        axis = macro.vertices[1] - macro.vertices[0]
        axis = axis / np.linalg.norm(axis)
        s = int(mesh.tet_strip[t])
        verts = mesh.nodes[mesh.tets[t]]
        labels = mesh.tet_vplane[t]
        short = _short_edges(verts, axis)
        patch = data.patches[t]
        patch_vol = float(np.sum(np.abs(tet_volumes(mesh.nodes[mesh.tets[patch]]))))
        for a in range(4):
            node = int(mesh.tets[t, a])
            if not on_edge[node]:
                continue
            best = None
            for p, q in pairs:
                if a not in (p, q):
                    continue
                b = q if p == a else p
                e = verts[b] - verts[a]
                if np.linalg.norm(np.cross(e, axis)) < 1e-9 * np.linalg.norm(e):
                    continue
                if labels[b] not in (labels[a], -2) and labels[a] != -2:
                    continue
                if best is None or np.linalg.norm(e) < np.linalg.norm(verts[best] - verts[a]):
                    best = b
            if best is None:
                continue
            other_plane = s + 1 if labels[a] == s else s
            x_n, x_m = verts[a], verts[best]
            h_n = _height_to_plane(x_n, axis, fam, other_plane)
            h_m = _height_to_plane(x_m, axis, fam, other_plane)
            sign = np.sign(h_n) if h_n != 0 else np.sign(h_m)
            h_n, h_m = abs(h_n), abs(h_m)
            sigma = x_m - x_n
            base = np.linalg.norm(np.cross(sigma, axis))
            area_f = 0.5 * (h_n + h_m) * base
            hp = min(h_n, h_m)
            area_p = hp * base
            corners = np.array([x_n, x_m, x_m + sign * hp * axis, x_n + sign * hp * axis])
            lhs = _quad_integral(corners, lambda x: np.abs(v.value(x)))
            s1, s2 = short
            tets = mesh.nodes[mesh.tets[patch]]
            ints = [_tets_integral(tets, lambda x: np.abs(v.value(x)))]
            for sv in (s1, s2):
                unit = sv / np.linalg.norm(sv)
                ints.append(np.linalg.norm(sv) * _tets_integral(tets, lambda x, u_=unit: np.abs(v.grad(x) @ u_)))
            rhs = area_f / patch_vol * sum(ints)
            out.append(PatchTraceSample(int(t), node, area_p / area_f, lhs / rhs))
    return out


def _short_edges(verts, axis):
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    edges = [verts[q] - verts[p] for p, q in pairs]
    cand = [e for e in edges if np.linalg.norm(np.cross(e, axis)) > 1e-9 * np.linalg.norm(e)]
    cand.sort(key=np.linalg.norm)
    first = cand[0]
    for e in cand[1:]:
        if np.linalg.norm(np.cross(e, first)) > 1e-9 * np.linalg.norm(e) * np.linalg.norm(first):
            return first, e
    return first, cand[1]


def _height_to_plane(x, axis, fam, i):
    """Signed distance along ``axis`` from ``x`` to plane ``i`` of the family."""
    return float((fam.offsets[i] - fam.normals[i] @ x) / (fam.normals[i] @ axis))


def _quad_integral(corners, func):
    a, b, c, d = corners
    return _tri_integral(np.array([a, b, c]), func) + _tri_integral(np.array([a, c, d]), func)


def trace_suite(levels=(2, 4, 8), data=None, v=None):
    """Patch trace ratios and parallelogram area ratios per level."""
    from .functions import ModelFunction

    if v is None:
        v = ModelFunction(lambda x: 1.0 + x[:, 0] + np.sin(x[:, 2]),
                          lambda x: np.column_stack([np.ones(len(x)), np.zeros(len(x)), np.cos(x[:, 2])]))
    max_ratio, min_area = [], []
    for n in levels:
        d = data[n] if data is not None and n in data else level_data(n)
        samples = patch_trace_samples(d, v)
        max_ratio.append(max(s.ratio for s in samples))
        min_area.append(min(s.area_ratio for s in samples))
    return max_ratio, min_area
