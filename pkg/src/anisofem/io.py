"""VTK legacy ASCII export and CSV helpers with deterministic formatting."""
import os

import numpy as np

VTK_TETRA = 10


def _fmt(values):
    return " ".join(f"{float(v):.12g}" for v in values)


def vtk_text(mesh, point_data=None, cell_data=None, title="anisofem mesh"):
    """Legacy VTK unstructured grid as a string.

    ``point_data`` and ``cell_data`` map names to arrays of length
    ``n_nodes`` and ``n_tets``; fields are written in sorted name order.
    """
    point_data = point_data or {}
    cell_data = cell_data or {}
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [_fmt(p) for p in mesh.nodes]
    lines.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    lines += ["4 " + " ".join(str(int(i)) for i in t) for t in mesh.tets]
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines += [str(VTK_TETRA)] * mesh.n_tets
    for header, count, data in (("CELL_DATA", mesh.n_tets, cell_data),
                                ("POINT_DATA", mesh.n_nodes, point_data)):
        if not data:
            continue
        lines.append(f"{header} {count}")
        for name in sorted(data):
            arr = np.asarray(data[name])
            if arr.shape != (count,):
                raise ValueError(f"field {name!r} has shape {arr.shape}, expected ({count},)")
            integer = np.issubdtype(arr.dtype, np.integer)
            lines.append(f"SCALARS {name} {'int' if integer else 'double'} 1")
            lines.append("LOOKUP_TABLE default")
            lines += [str(int(v)) for v in arr] if integer else [f"{float(v):.12g}" for v in arr]
    return "\n".join(lines) + "\n"


def mesh_cell_fields(mesh):
    """Macro id and the anisotropic sizes h1, h3 per cell."""
    from .mesh import all_element_sizes

    sizes = all_element_sizes(mesh)
    return {"macro_id": mesh.macro_of.astype(np.int64), "h1": sizes[:, 0], "h3": sizes[:, 2]}


def write_vtk(path, mesh, point_data=None, cell_data=None):
    with open(path, "w", newline="\n") as fh:
        fh.write(vtk_text(mesh, point_data, cell_data))
    return path


def level_vtk_path(directory, n):
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, f"level_{n:03d}.vtk")


def write_csv(path, header, rows):
    """Write ``rows`` (sequences of already formatted fields or numbers)."""
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(r if isinstance(r, str) else f"{r:.12g}" for r in row) + "\n")
    return path
