"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import logging
import math
import os
import sys

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _levels(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid level list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty level list")
    return vals


def _bound(text):
    t = text.strip().lower()
    if t in ("inf", "+inf", "infinity"):
        return math.inf
    if t in ("-inf", "-infinity"):
        return -math.inf
    return float(t)


def _common(p, levels="4,8,16"):
    p.add_argument("--domain", default="builtin:fichera",
                   help="builtin:fichera, builtin:cube (ocp only) or a macro file path")
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--nu", type=float, default=0.5)
    p.add_argument("--quasi-uniform", action="store_true")
    p.add_argument("--levels", type=_levels, default=_levels(levels), help="comma separated, e.g. 4,8,16")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--csv", default=None, help="write the result table to this file")
    p.add_argument("--vtk", default=None, help="directory for per-level VTK files")


def build_parser():
    parser = argparse.ArgumentParser(prog="anisofem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build meshes and report sizes and quality")
    _common(p)
    p.add_argument("--quality", action="store_true", help="also check angles and conformity")
    p = sub.add_parser("solve", help="solve the Poisson problem on each level")
    _common(p)
    p = sub.add_parser("convergence", help="convergence study with fine-reference errors")
    _common(p)
    p = sub.add_parser("checks", help="local interpolation and trace ratio suites")
    _common(p, levels="2,4,8")
    p.add_argument("--cases", type=_levels, default=(1, 2, 3, 4, 5, 6, 7))
    p = sub.add_parser("exponent", help="vertex singular exponent from the spherical eigenproblem")
    p.add_argument("--patch", default="builtin:fichera",
                   choices=[f"{pre}{name}" for pre in ("", "builtin:") for name in ("fichera", "halfspace", "octant")])
    p.add_argument("--level", "--levels", dest="level", type=int, default=6,
                   help="finest sphere refinement level (three levels are extrapolated)")
    p = sub.add_parser("ocp", help="optimal control convergence study")
    _common(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--ua", type=_bound, default=0.0)
    p.add_argument("--ub", type=_bound, default=0.5)
    return parser


def _emit(text, path):
    sys.stdout.write(text)
    if path:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def _run_config(args):
    from .convergence import RunConfig

    return RunConfig(args.domain, args.mu, args.nu, args.quasi_uniform, args.levels, args.tol,
                     args.csv, args.vtk)


def cmd_mesh(args):
    from .io import level_vtk_path, mesh_cell_fields, write_vtk
    from .mesh import all_element_sizes, build_mesh, mesh_quality

    macros = _run_config(args).macros()
    lines = ["n,nodes,tets,min_h1_over_h3" + (",max_dihedral_deg,valid" if args.quality else "")]
    for n in args.levels:
        mesh = build_mesh(macros, n)
        sizes = all_element_sizes(mesh)
        row = [str(n), str(mesh.n_nodes), str(mesh.n_tets), f"{np.min(sizes[:, 0] / sizes[:, 2]):.12g}"]
        if args.quality:
            q = mesh_quality(mesh)
            row += [f"{math.degrees(q.max_dihedral_angle):.12g}", str(q.valid).lower()]
        lines.append(",".join(row))
        if args.vtk:
            write_vtk(level_vtk_path(args.vtk, n), mesh, cell_data=mesh_cell_fields(mesh))
    _emit("\n".join(lines) + "\n", args.csv)
    return EXIT_OK


def cmd_solve(args):
    from .fem import fe_norms, residual_estimate, singular_points_of, solve_poisson
    from .functions import fichera_source
    from .io import level_vtk_path, mesh_cell_fields, write_vtk
    from .mesh import build_mesh

    config = _run_config(args)
    macros = config.macros()
    singular = np.zeros((1, 3)) if config.domain == "builtin:fichera" else singular_points_of(macros)
    lines = ["n,N_dofs,cg_iterations,energy_error_est,H1_norm"]
    for n in config.levels:
        mesh = build_mesh(macros, n)
        system, sol = solve_poisson(mesh, fichera_source, tol=config.tol, singular_points=singular)
        est = residual_estimate(mesh, sol.u, fichera_source, singular_points=singular).total
        norm = math.hypot(*fe_norms(mesh, sol.u))
        lines.append(f"{n},{len(system.free)},{sol.iterations},{est:.12g},{norm:.12g}")
        if config.vtk:
            write_vtk(level_vtk_path(config.vtk, n), mesh, {"u": sol.u}, mesh_cell_fields(mesh))
    _emit("\n".join(lines) + "\n", config.csv)
    return EXIT_OK


def cmd_convergence(args):
    from .convergence import run_convergence

    config = _run_config(args)
    csv_path, config.csv = config.csv, None
    report = run_convergence(config)
    _emit(report.csv_text(), csv_path)
    return EXIT_OK


def cmd_checks(args):
    from .analysis import CASES, level_data, local_interp_ratio, trace_suite

    if any(c not in CASES for c in args.cases):
        from .convergence import ConfigError

        raise ConfigError(f"cases must be among {CASES}")
    _run_config(args).macros()  # validates grading
    data = {n: level_data(n, args.mu, args.nu) for n in args.levels}
    rows, summary = ["case,n,element_id,lhs,rhs,ratio"], []
    for case in args.cases:
        rep = local_interp_ratio(case, args.levels, args.mu, args.nu, data=data)
        rows += rep.csv_rows()
        levels = " ".join(f"{r:.4g}" for r in rep.max_ratio)
        summary.append(f"case {case}: max ratio per level {levels} -> {'bounded' if rep.bounded else 'UNBOUNDED'}")
    ratios, areas = trace_suite(args.levels, data=data)
    summary.append("patch trace: max ratio per level " + " ".join(f"{r:.4g}" for r in ratios)
                   + f"; min |P|/|F| {min(areas):.4g}")
    if args.csv:
        with open(args.csv, "w", newline="\n") as fh:
            fh.write("\n".join(rows) + "\n")
    sys.stdout.write("\n".join(summary) + "\n")
    return EXIT_OK


def cmd_exponent(args):
    from .convergence import ConfigError
    from .exponents import vertex_exponent

    patch = args.patch.removeprefix("builtin:")
    try:
        res = vertex_exponent(patch, args.level)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sys.stdout.write(f"patch={patch} mu1={res.mu1:.6f} lambda_v={res.lambda_v:.6f}\n")
    return EXIT_OK


def cmd_ocp(args):
    from .convergence import ConfigError
    from .mesh import check_grading
    from .ocp import OCPConfig, ocp_convergence, ocp_macros

    try:
        config = OCPConfig(args.alpha, args.ua, args.ub)
        macros = ocp_macros(args.domain, args.mu, args.nu, args.quasi_uniform)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not args.quasi_uniform:
        for m in macros:
            ok, msg = check_grading(m.mu, m.nu, m.lambda_e, m.lambda_v)
            if not ok:
                raise ConfigError(f"grading condition violated: {msg}")
    report = ocp_convergence(args.levels, config, macros, tol=max(args.tol, 1e-12) * 100)
    _emit(report.csv_text(), args.csv)
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "solve": cmd_solve, "convergence": cmd_convergence,
            "checks": cmd_checks, "exponent": cmd_exponent, "ocp": cmd_ocp}


def main(argv=None):
    from .convergence import ConfigError
    from .fem import DivergenceError, SolverError
    from .mesh import MeshError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "vtk", None):
        os.makedirs(args.vtk, exist_ok=True)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MeshError) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except (SolverError, DivergenceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
