"""Convergence studies on graded and quasi-uniform meshes."""
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import PointLocator, eoc, error_norms, fe_norms, fitted_order, residual_estimate, solve_poisson
from .functions import fichera_source, fichera_source_l2_norm
from .mesh import build_fichera_macros, build_mesh, check_grading, read_macro_file

log = logging.getLogger(__name__)

CSV_HEADER = "n,N_dofs,h,energy_error_est,ref_H1_err,ref_L2_err,eoc_H1,eoc_L2"


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    domain: str = "builtin:fichera"
    mu: float = 0.5
    nu: float = 0.5
    quasi_uniform: bool = False
    levels: tuple = (4, 8, 16)
    tol: float = 1e-10
    csv: str = None
    vtk: str = None

    def __post_init__(self):
        self.levels = tuple(int(n) for n in self.levels)
        if not self.levels or any(n < 1 for n in self.levels):
            raise ConfigError("levels must be positive integers")
        if list(self.levels) != sorted(set(self.levels)):
            raise ConfigError("levels must be strictly ascending")
        if not self.tol > 0:
            raise ConfigError("tolerance must be positive")

    def macros(self):
        if self.domain == "builtin:fichera":
            macros = build_fichera_macros(self.mu, self.nu, quasi_uniform=self.quasi_uniform)
        else:
            try:
                macros = read_macro_file(self.domain)
            except (OSError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
            if self.quasi_uniform:
                for m in macros:
                    m.mu = m.nu = 1.0
        if not self.quasi_uniform:
            for m in macros:
                ok, msg = check_grading(m.mu, m.nu, m.lambda_e, m.lambda_v)
                if not ok:
                    raise ConfigError(f"grading condition violated: {msg}")
        return macros


@dataclass
class LevelResult:
    n: int
    dofs: int
    estimator: float
    h1_err: float = math.nan
    l2_err: float = math.nan
    h1_norm: float = math.nan
    f_l2: float = math.nan
    iterations: int = 0
    seconds: float = 0.0


@dataclass
class ConvergenceReport:
    levels: list = field(default_factory=list)
    solved: list = field(default_factory=list)  # every solved level, reference levels included

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
        e = np.array([getattr(r, attr) for r in self.levels])
        return fitted_order(e, self.hs)

    def csv_text(self):
        lines = [CSV_HEADER]
        eh, el = self.pairwise("h1_err"), self.pairwise("l2_err")
        for r, a, b in zip(self.levels, eh, el):
            lines.append(",".join([
                str(r.n), str(r.dofs), _g(1.0 / r.n), _g(r.estimator), _g(r.h1_err),
                _g(r.l2_err), _eoc(a), _eoc(b)]))
        return "\n".join(lines) + "\n"


def _g(x):
    return f"{x:.12g}"


def _eoc(x):
    return "" if math.isnan(x) else f"{x:.2f}"


def run_convergence(config, source=None, on_level=None):
    """Solve on every level plus one extra level ``2 n_max`` used as reference.

    Errors of level ``n`` are measured against the solution on level ``2 n``
    (the next level of the list, or the extra reference level).
    """
    macros = config.macros()
    source = fichera_source if source is None else source
    fichera = config.domain == "builtin:fichera"
    singular = np.zeros((1, 3)) if fichera else None
    f_norm = fichera_source_l2_norm() if fichera and source is fichera_source else None
    ns = list(config.levels)
    solve_ns = sorted(set(ns) | {2 * n for n in ns})
    meshes, sols, report = {}, {}, ConvergenceReport()
    results = {}
    for n in solve_ns:
        t0 = time.perf_counter()
        mesh = build_mesh(macros, n)
        system, sol = solve_poisson(mesh, source, tol=config.tol, singular_points=singular)
        rec = LevelResult(n, int(len(system.free)), math.nan, iterations=sol.iterations)
        rec.h1_norm = math.sqrt(sum(x * x for x in fe_norms(mesh, sol.u)))
        rec.f_l2 = f_norm if f_norm is not None else math.sqrt(_source_l2_sq(mesh, source, singular))
        if n in ns:
            rec.estimator = residual_estimate(mesh, sol.u, source, singular_points=singular).total
        if config.vtk and n in ns:
            from .io import level_vtk_path, mesh_cell_fields, write_vtk

            write_vtk(level_vtk_path(config.vtk, n), mesh, {"u": sol.u}, mesh_cell_fields(mesh))
        rec.seconds = time.perf_counter() - t0
        log.info("level %d: %d dofs, %d CG iterations, %.1fs", n, rec.dofs, rec.iterations, rec.seconds)
        meshes[n], sols[n], results[n] = mesh, sol.u, rec
        # errors for the level whose reference just became available
        coarse = n // 2 if n % 2 == 0 else None
        if coarse in ns and coarse in meshes:
            loc = PointLocator(meshes[coarse])
            h1, l2 = error_norms(meshes[coarse], sols[coarse], (mesh, sol.u), locator=loc)
            results[coarse].h1_err, results[coarse].l2_err = h1, l2
            if on_level is not None:
                on_level(meshes[coarse], sols[coarse], results[coarse])
        # free what is no longer needed
        for k in list(meshes):
            if k < n // 2 or (k not in ns and k != n):
                meshes.pop(k)
                sols.pop(k)
    report.levels = [results[n] for n in ns]
    report.solved = [results[n] for n in solve_ns]
    if config.csv:
        with open(config.csv, "w") as fh:
            fh.write(report.csv_text())
    return report


def _source_l2_sq(mesh, f, singular):
    from .fem import _element_l2_squared, singular_points_of

    pts = singular_points_of(mesh.macros) if singular is None else singular
    return float(_element_l2_squared(mesh, f, pts).sum())


def stability_slopes(results):
    """Pairwise and fitted log-log slopes of ``||u_h||_H1 / ||f||_L2`` against ``h``."""
    ratios = np.array([r.h1_norm / r.f_l2 for r in results])
    hs = np.array([1.0 / r.n for r in results])
    return ratios, eoc(ratios, hs), fitted_order(ratios, hs)


def stability_ratios(levels=(2, 4, 8, 16), mu=0.5, nu=0.5, tol=1e-10):
    """``||u_h||_H1 / ||f||_L2`` on graded Fichera meshes and its log-log slope in h."""
    macros = build_fichera_macros(mu, nu)
    f_norm = fichera_source_l2_norm()
    ratios = []
    for n in levels:
        mesh = build_mesh(macros, n)
        _, sol = solve_poisson(mesh, fichera_source, tol=tol, singular_points=np.zeros((1, 3)))
        semi, l2 = fe_norms(mesh, sol.u)
        ratios.append(math.hypot(semi, l2) / f_norm)
    hs = 1.0 / np.asarray(levels, float)
    return np.array(ratios), fitted_order(ratios, hs)
