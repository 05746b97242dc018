"""Bit-stable text output: legacy VTK, CSV tables and gnuplot scripts."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .mesh import Mesh

CSV_COLUMNS = (
    "level",
    "h",
    "ndof_u",
    "ndof_lambda",
    "ndof_total",
    "err_u_h1",
    "err_lambda_neg",
    "eta",
    "S",
    "rate_u",
    "rate_lambda",
    "slope_u_N",
    "pdas_iters",
    "conform_ring_vertices",
)


def fmt(x) -> str:
    """17 significant digits for floats, plain text for integers."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return "%.17g" % x


def write_vtk(
    path,
    mesh: Mesh,
    point_data: Optional[Mapping[str, np.ndarray]] = None,
    cell_data: Optional[Mapping[str, np.ndarray]] = None,
    title: str = "obstacle-fem",
) -> None:
    """Legacy ASCII unstructured grid with triangle cells."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.nvertices} double")
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices]
    nt = mesh.nelements
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    for kind, n, data in (("POINT_DATA", mesh.nvertices, point_data), ("CELL_DATA", nt, cell_data)):
        if not data:
            continue
        lines.append(f"{kind} {n}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (n,):
                raise ValueError(f"{name}: expected {n} values, got {values.shape}")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [fmt(v) for v in values]
    Path(path).write_text("\n".join(lines) + "\n")


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str] = CSV_COLUMNS) -> None:
    out = [",".join(columns)]
    for row in rows:
        out.append(",".join(fmt(row[c]) for c in columns))
    Path(path).write_text("\n".join(out) + "\n")


def read_csv(path):
    """Parse a table written by :func:`write_csv` into a list of dicts of floats."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, map(float, line.split(",")))) for line in lines[1:]]


def gnuplot_script(csv_name: str, title: str) -> str:
    """Log-log plots of the error columns against h and against the dof count."""
    return f"""# {title}
set datafile separator ','
set key autotitle columnhead
set logscale xy
set grid
set terminal pngcairo size 1200,500
set output '{Path(csv_name).stem}.png'
set multiplot layout 1,2
set xlabel 'h'
set ylabel 'error'
plot '{csv_name}' using 2:6 with linespoints title 'H1 error of u', \\
     '' using 2:7 with linespoints title 'discrete H-1 error of lambda', \\
     '' using 2:8 with linespoints title 'estimator eta'
set xlabel 'N (total dofs)'
plot '{csv_name}' using 5:6 with linespoints title 'H1 error of u', \\
     '' using 5:7 with linespoints title 'discrete H-1 error of lambda', \\
     '' using 5:8 with linespoints title 'estimator eta'
unset multiplot
"""
