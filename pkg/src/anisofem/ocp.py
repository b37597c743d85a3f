"""Control-constrained linear-quadratic optimal control with variational discretization.

Problem: minimise ``J(y, u) = 1/2 ||y - yd||^2 + alpha/2 ||u||^2`` subject to
``-Laplace y = u`` in the domain, ``y = 0`` on the boundary and
``ua <= u <= ub``.  Only the state is discretized; the control is the
closed-form projection ``u = clamp(-p_h / alpha, ua, ub)`` of the discrete
adjoint ``p_h``.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .fem import CHUNK, PointLocator, SolverError, assemble, fitted_order, load_vector, mass_matrix, red_refine, solve
from .mesh import build_cube_macros, build_fichera_macros, build_mesh
from .quadrature import tet_rule, tet_volumes

log = logging.getLogger(__name__)


def constant_target(value=1.0):
    return lambda x: np.full(len(np.atleast_2d(x)), float(value))


@dataclass
class OCPConfig:
    alpha: float = 0.1
    ua: float = 0.0
    ub: float = 0.5
    yd: Callable = field(default_factory=constant_target)

    def __post_init__(self):
        self.alpha, self.ua, self.ub = float(self.alpha), float(self.ua), float(self.ub)
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be a positive number")
        if math.isnan(self.ua) or math.isnan(self.ub) or self.ua > self.ub:
            raise ValueError("control bounds must satisfy ua <= ub")

    def project(self, p):
        return np.clip(-np.asarray(p) / self.alpha, self.ua, self.ub)


@dataclass
class OCPSolution:
    mesh: object
    config: OCPConfig
    y: np.ndarray
    p: np.ndarray
    iterations: int
    residual: float  # L2 norm of the last fixed-point update of the control
    objective: list  # J at every accepted iterate

    def u(self, x, tets=None, bary=None):
        """Control at points ``x``; pass located ``(tets, bary)`` to skip the search."""
        if tets is None:
            tets, bary = PointLocator(self.mesh).locate(np.atleast_2d(x))
        return self.config.project(np.einsum("pk,pk->p", bary, self.p[self.mesh.tets[tets]]))

    def u_at_nodes(self):
        return self.config.project(self.p)


# ----------------------------------------------------------------------------
# quadrature of the projected control


@lru_cache(maxsize=None)
def _composite_rule(levels=2, degree=2):
    """Degree-2 rule on ``8**levels`` red subtetrahedra, in barycentric coordinates."""
    kids = np.eye(4)[None]
    for _ in range(levels):
        kids = red_refine(kids)
    rule = tet_rule(degree)
    pts = np.einsum("qk,mkd->mqd", rule.points, kids).reshape(-1, 4)
    w = np.tile(rule.weights, len(kids)) / len(kids)
    return pts, w


def _kinked(vals, config):
    """Elements where the projection of the linear ``-p/alpha`` hits a bound inside."""
    lo, hi = vals.min(axis=1), vals.max(axis=1)
    out = np.zeros(len(vals), dtype=bool)
    for b in (config.ua, config.ub):
        if math.isfinite(b):
            out |= (lo < b) & (hi > b)
    return out


def _element_groups(vals, config):
    """Yield ``(element mask, barycentric points, weights)`` per quadrature group."""
    kink = _kinked(vals, config)
    smooth = tet_rule(2)
    yield ~kink, smooth.points, smooth.weights
    if kink.any():
        pts, w = _composite_rule()
        yield kink, pts, w


def control_load(mesh, p, config, chunk=CHUNK):
    """``b_i = int clamp(-p/alpha) phi_i`` with kinks resolved by subdivision."""
    b = np.zeros(mesh.n_nodes)
    for s in range(0, mesh.n_tets, chunk):
        t = mesh.tets[s:s + chunk]
        vol = np.abs(tet_volumes(mesh.nodes[t]))
        vals = -p[t] / config.alpha
        for mask, pts, w in _element_groups(vals, config):
            if not mask.any():
                continue
            u = config.project(-(vals[mask] @ pts.T) * config.alpha)
            local = vol[mask, None] * ((u * w) @ pts)
            np.add.at(b, t[mask].ravel(), local.ravel())
    return b


def control_l2_sq(mesh, p, config, chunk=CHUNK):
    total = 0.0
    for s in range(0, mesh.n_tets, chunk):
        t = mesh.tets[s:s + chunk]
        vol = np.abs(tet_volumes(mesh.nodes[t]))
        vals = -p[t] / config.alpha
        for mask, pts, w in _element_groups(vals, config):
            if mask.any():
                u = config.project(-(vals[mask] @ pts.T) * config.alpha)
                total += float(vol[mask] @ ((u**2) @ w))
    return total


def projection_residual(mesh, sol, chunk=CHUNK):
    """Largest deviation of ``sol.u`` from ``clamp(-p_h/alpha)`` over all quadrature points."""
    worst = 0.0
    cfg = sol.config
    for s in range(0, mesh.n_tets, chunk):
        t = mesh.tets[s:s + chunk]
        vals = -sol.p[t] / cfg.alpha
        for mask, pts, _ in _element_groups(vals, cfg):
            if not mask.any():
                continue
            idx = np.repeat(np.arange(s, s + len(t))[mask], len(pts))
            bary = np.tile(pts, (int(mask.sum()), 1))
            got = sol.u(None, idx, bary)
            want = np.clip(vals[mask] @ pts.T, cfg.ua, cfg.ub).ravel()
            worst = max(worst, float(np.max(np.abs(got - want))))
    return worst


# ----------------------------------------------------------------------------
# solver


def _objective(y, u_sq, mass, yd_load, yd_sq, alpha):
    # ||y - yd||^2 = y'My - 2 y'b_yd + ||yd||^2
    track = float(y @ (mass @ y) - 2.0 * y @ yd_load + yd_sq)
    return 0.5 * track + 0.5 * alpha * u_sq


def _yd_l2_sq(mesh, yd, chunk=CHUNK):
    rule = tet_rule(5)
    total = 0.0
    for s in range(0, mesh.n_tets, chunk):
        v = mesh.nodes[mesh.tets[s:s + chunk]]
        vol = np.abs(tet_volumes(v))
        pts = np.einsum("qk,mkd->mqd", rule.points, v).reshape(-1, 3)
        total += float(vol @ ((yd(pts).reshape(len(v), -1) ** 2) @ rule.weights))
    return total


def solve_ocp(mesh, config, tol=1e-8, max_iter=200, cg_tol=None, theta=1.0):
    """Damped fixed-point iteration ``p -> adjoint(state(clamp(-p/alpha)))``.

    The damping factor is halved whenever a step would increase the
    objective beyond the noise level of the linear solves; such steps are
    rejected.
    Raises :class:`SolverError` when ``max_iter`` is exhausted.
    """
    cg_tol = min(1e-10, tol * 1e-2) if cg_tol is None else cg_tol
    system = assemble(mesh, None)
    a, _ = system.reduced()
    mass = mass_matrix(mesh)
    yd_load = load_vector(mesh, config.yd)
    yd_sq = _yd_l2_sq(mesh, config.yd)

    def state(p, y0):
        system.load = control_load(mesh, p, config)
        return solve(system, cg_tol, x0=y0, matrix=a).u

    def adjoint(y, p0):
        system.load = mass @ y - yd_load
        return solve(system, cg_tol, x0=p0, matrix=a).u

    def u_dist(p1, p2):
        # || clamp(-p1/alpha) - clamp(-p2/alpha) ||_L2 via nodal values and the mass matrix
        d = config.project(p1) - config.project(p2)
        return math.sqrt(max(float(d @ (mass @ d)), 0.0))

    # J is only known to about the relative accuracy of the CG solves
    noise = 10.0 * cg_tol
    p = np.zeros(mesh.n_nodes)
    y = state(p, None)
    obj = [_objective(y, control_l2_sq(mesh, p, config), mass, yd_load, yd_sq, config.alpha)]
    residual = math.inf
    for it in range(1, max_iter + 1):
        target = adjoint(y, p)
        residual = u_dist(target, p)
        log.debug("fixed point %d: residual %.3e, theta %.3g", it, residual, theta)
        if residual <= tol:
            return OCPSolution(mesh, config, y, target, it, residual, obj)
        while True:
            cand = p + theta * (target - p)
            y_c = state(cand, y)
            j_c = _objective(y_c, control_l2_sq(mesh, cand, config), mass, yd_load, yd_sq, config.alpha)
            if j_c <= obj[-1] + noise * max(1.0, abs(obj[-1])) or theta < 1e-6:
                break
            theta *= 0.5
        p, y = cand, y_c
        obj.append(j_c)
    raise SolverError(f"fixed-point iteration did not converge in {max_iter} steps "
                      f"(last residual {residual:.3e})")


# ----------------------------------------------------------------------------
# convergence


OCP_CSV_HEADER = "n,N_dofs,h,err_u,err_y,err_p,eoc_u,eoc_y,eoc_p,iterations"


@dataclass
class OCPLevel:
    n: int
    dofs: int
    iterations: int
    err_u: float = math.nan
    err_y: float = math.nan
    err_p: float = math.nan
    projection: float = math.nan  # projection_residual of the level solution


@dataclass
class OCPReport:
    levels: list

    @property
    def hs(self):
        return np.array([1.0 / r.n for r in self.levels])

    def pairwise(self, attr):
        e = np.array([getattr(r, attr) for r in self.levels])
        out = [math.nan]
        for i in range(1, len(e)):
            out.append(math.log(e[i - 1] / e[i]) / math.log(self.hs[i - 1] / self.hs[i]))
        return out

    def order(self, attr):
        return fitted_order(np.array([getattr(r, attr) for r in self.levels]), self.hs)

    def csv_text(self):
        lines = [OCP_CSV_HEADER]
        cols = [self.pairwise(a) for a in ("err_u", "err_y", "err_p")]
        for r, eu, ey, ep in zip(self.levels, *cols):
            fmt = ["" if math.isnan(x) else f"{x:.2f}" for x in (eu, ey, ep)]
            lines.append(",".join([str(r.n), str(r.dofs), f"{1.0 / r.n:.12g}", f"{r.err_u:.12g}",
                                   f"{r.err_y:.12g}", f"{r.err_p:.12g}", *fmt, str(r.iterations)]))
        return "\n".join(lines) + "\n"


def level_errors(coarse, fine, chunk=CHUNK):
    """L2 differences of control, state and adjoint between two solutions.

    Integrated on the fine mesh; elements where either control has a kink
    use the composite rule.
    """
    cfg = coarse.config
    loc = PointLocator(coarse.mesh)
    fm = fine.mesh
    sums = np.zeros(3)
    for s in range(0, fm.n_tets, chunk):
        t = fm.tets[s:s + chunk]
        v = fm.nodes[t]
        vol = np.abs(tet_volumes(v))
        vals = -fine.p[t] / cfg.alpha
        for mask, pts, w in _element_groups(vals, cfg):
            if not mask.any():
                continue
            x = np.einsum("qk,mkd->mqd", pts, v[mask]).reshape(-1, 3)
            ct, cb = loc.locate(x)
            shape = (int(mask.sum()), len(w))
            yc = np.einsum("pk,pk->p", cb, coarse.y[coarse.mesh.tets[ct]]).reshape(shape)
            pc = np.einsum("pk,pk->p", cb, coarse.p[coarse.mesh.tets[ct]]).reshape(shape)
            yf, pf = fine.y[t[mask]] @ pts.T, fine.p[t[mask]] @ pts.T
            du = cfg.project(pc) - cfg.project(pf)
            for k, d in enumerate((du, yc - yf, pc - pf)):
                sums[k] += float(vol[mask] @ ((d**2) @ w))
    return tuple(np.sqrt(sums))


def ocp_macros(domain="builtin:fichera", mu=0.5, nu=0.5, quasi_uniform=False):
    if domain == "builtin:fichera":
        return build_fichera_macros(mu, nu, quasi_uniform=quasi_uniform)
    if domain == "builtin:cube":
        return build_cube_macros()
    from .mesh import read_macro_file

    return read_macro_file(domain)


def ocp_convergence(levels=(4, 8, 16), config=None, macros=None, tol=1e-8):
    """Errors of every level against the solution on the doubled level."""
    config = OCPConfig() if config is None else config
    macros = ocp_macros() if macros is None else macros
    levels = sorted(int(n) for n in levels)
    sols, rows = {}, {}
    for n in sorted(set(levels) | {2 * n for n in levels}):
        mesh = build_mesh(macros, n)
        sol = solve_ocp(mesh, config, tol=tol)
        log.info("ocp level %d: %d fixed-point steps", n, sol.iterations)
        sols[n] = sol
        if n in levels:
            rows[n] = OCPLevel(n, int(mesh.n_nodes - np.count_nonzero(_boundary(mesh))), sol.iterations,
                               projection=projection_residual(mesh, sol))
        if n % 2 == 0 and n // 2 in rows:
            rows[n // 2].err_u, rows[n // 2].err_y, rows[n // 2].err_p = level_errors(sols[n // 2], sol)
        for k in list(sols):
            if k < n // 2 or (k not in levels and k != n):
                sols.pop(k)
    return OCPReport([rows[n] for n in levels])


def _boundary(mesh):
    from .fem import boundary_nodes

    mask = np.zeros(mesh.n_nodes, dtype=bool)
    mask[boundary_nodes(mesh)] = True
    return mask
