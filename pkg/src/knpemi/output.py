"""Run artefacts: probe CSV, legacy VTK snapshots, convergence tables.

All emitted values are in reporting units (mV, mM, µA/cm², µm, ms)
regardless of the solver's internal SI state, and all formatting is
fixed-width printf style so identical runs produce identical bytes.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

FLOAT_FMT = "%.10g"

PROBE_HEADER = ("time_ms", "probe", "field", "value")

VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


def to_report_units(field, values):
    """SI solver values -> reporting units, keyed by field name."""
    values = np.asarray(values, dtype=float)
    if field.startswith("phi") or field.startswith("E_"):
        return values * 1e3        # V -> mV
    if field == "I_M":
        return values * 100.0      # A/m^2 -> µA/cm^2
    return values                  # mol/m^3 == mM; gates dimensionless


@dataclass(frozen=True)
class ProbeRecord:
    time_ms: float
    probe: str
    field: str
    value: float


def write_probes(records, path):
    """CSV with header time_ms,probe,field,value; empty list -> header only."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROBE_HEADER)
        for rec in records:
            writer.writerow((FLOAT_FMT % rec.time_ms, rec.probe, rec.field,
                             FLOAT_FMT % rec.value))


def read_probes(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PROBE_HEADER:
            raise ConfigurationError(
                f"{path} is not a probe CSV (expected header "
                + ",".join(PROBE_HEADER) + ")")
        return [ProbeRecord(float(t), p, f, float(v))
                for t, p, f, v in reader]


# -- VTK -------------------------------------------------------------------

def scatter_point_field(space, nodal, num_vertices):
    """Nodal values -> full-mesh vertex array, NaN off the space's region."""
    out = np.full(num_vertices, np.nan)
    nv = len(space.vertex_keys)
    out[space.vertex_keys] = np.asarray(nodal, dtype=float)[:nv]
    return out


def write_vtk(path, mesh, point_data, title="snapshot", coord_scale=1e6):
    """Legacy ASCII unstructured grid; coordinates scaled to µm.

    ``point_data`` maps field name -> per-vertex array in reporting
    units, NaN where a field is not defined.
    """
    pts = np.asarray(mesh.vertices, dtype=float) * coord_scale
    if pts.shape[1] < 3:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 3 - pts.shape[1]))])
    cells = mesh.cells
    ctype = VTK_CELL_TYPE[mesh.dim]
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 3.0\n")
    buf.write(title.replace("\n", " ")[:255] + "\n")
    buf.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    buf.write(f"POINTS {pts.shape[0]} double\n")
    for x, y, z in pts:
        buf.write(f"{FLOAT_FMT % x} {FLOAT_FMT % y} {FLOAT_FMT % z}\n")
    nloc = cells.shape[1]
    buf.write(f"CELLS {cells.shape[0]} {cells.shape[0] * (nloc + 1)}\n")
    for row in cells:
        buf.write(str(nloc) + " " + " ".join(str(int(v)) for v in row) + "\n")
    buf.write(f"CELL_TYPES {cells.shape[0]}\n")
    for _ in range(cells.shape[0]):
        buf.write(f"{ctype}\n")
    buf.write(f"CELL_DATA {cells.shape[0]}\n")
    buf.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
    for tag in mesh.cell_tags:
        buf.write(f"{int(tag)}\n")
    buf.write(f"POINT_DATA {pts.shape[0]}\n")
    for name in point_data:
        values = np.asarray(point_data[name], dtype=float)
        if values.shape != (pts.shape[0],):
            raise ConfigurationError(
                f"point data {name!r} has shape {values.shape}, "
                f"expected ({pts.shape[0]},)")
        buf.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        for v in values:
            buf.write((FLOAT_FMT % v) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


@dataclass(frozen=True)
class VtkGrid:
    points: np.ndarray      # (n, 3), µm
    cells: np.ndarray       # (nc, nloc)
    cell_type: int
    cell_data: dict         # name -> (nc,) array
    point_data: dict        # name -> (n,) array


def read_vtk(path):
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split("\n")
    lines = [ln.strip() for ln in tokens]
    i = 0

    def expect(prefix):
        nonlocal i
        while i < len(lines) and not lines[i]:
            i += 1
        if i >= len(lines) or not lines[i].startswith(prefix):
            got = lines[i] if i < len(lines) else "<eof>"
            raise ConfigurationError(
                f"{path}: expected {prefix!r}, got {got!r}")
        line = lines[i]
        i += 1
        return line

    expect("# vtk DataFile")
    i += 1  # title
    expect("ASCII")
    expect("DATASET UNSTRUCTURED_GRID")
    n = int(expect("POINTS").split()[1])
    points = np.array([lines[i + k].split() for k in range(n)], dtype=float)
    i += n
    header = expect("CELLS").split()
    nc = int(header[1])
    rows = [lines[i + k].split() for k in range(nc)]
    i += nc
    nloc = int(rows[0][0])
    cells = np.array([r[1:] for r in rows], dtype=np.int64)
    expect("CELL_TYPES")
    ctype = int(lines[i])
    i += nc
    cell_data = {}
    point_data = {}
    section, count = None, 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line:
            continue
        if line.startswith("CELL_DATA"):
            section, count = cell_data, nc
        elif line.startswith("POINT_DATA"):
            section, count = point_data, n
        elif line.startswith("SCALARS"):
            name, kind = line.split()[1:3]
            i += 1  # LOOKUP_TABLE
            dtype = np.int64 if kind == "int" else float
            section[name] = np.array(lines[i:i + count], dtype=dtype)
            i += count
        else:
            raise ConfigurationError(f"{path}: unsupported section {line!r}")
    return VtkGrid(points=points, cells=cells, cell_type=ctype,
                   cell_data=cell_data, point_data=point_data)


def probe_grid(grid, field, points_um):
    """Interpolate a point-data field at coordinates (µm).

    Piecewise-linear interpolation from the vertex values; cells where
    the field carries NaN (the other region) are skipped, so membrane
    points take the value from whichever side defines the field.
    """
    if field not in grid.point_data:
        raise ConfigurationError(
            f"field {field!r} not in snapshot (has: "
            + ", ".join(sorted(grid.point_data)) + ")")
    values = grid.point_data[field]
    pts = np.atleast_2d(np.asarray(points_um, dtype=float))
    dim = 2 if grid.cell_type == 5 else 3
    verts = grid.points[:, :dim]
    if pts.shape[1] != dim:
        raise ConfigurationError(
            f"probe points have {pts.shape[1]} coordinates, grid has {dim}")
    out = np.full(pts.shape[0], np.nan)
    x0 = verts[grid.cells[:, 0]]
    span = np.stack([verts[grid.cells[:, k]] - x0
                     for k in range(1, dim + 1)], axis=-1)
    inv = np.linalg.inv(span)
    finite = np.isfinite(values[grid.cells]).all(axis=1)
    for j, p in enumerate(pts):
        lam = np.einsum("cab,cb->ca", inv, p - x0)
        bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam],
                              axis=1)
        inside = (bary >= -1e-10).all(axis=1)
        candidates = np.flatnonzero(inside & finite)
        if candidates.size == 0:
            candidates = np.flatnonzero(inside)
        if candidates.size == 0:
            raise ConfigurationError(
                f"probe point {p.tolist()} lies outside the grid")
        c = candidates[0]
        out[j] = float(bary[c] @ values[grid.cells[c]])
    return out


# -- convergence report ------------------------------------------------------

CONVERGENCE_HEADER = ("n", "dt", "label", "error", "rate")


def write_convergence_csv(report, path):
    """Tidy CSV: one row per (level, error label), rate blank on level 0."""
    rows = report.rows()
    dts = {lev.n: lev.dt for lev in report.levels}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONVERGENCE_HEADER)
        for n, label, err, rate in rows:
            writer.writerow((n, FLOAT_FMT % dts[n], label, "%.6E" % err,
                             "" if rate is None else "%.2f" % rate))


def read_convergence_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CONVERGENCE_HEADER:
            raise ConfigurationError(f"{path} is not a convergence CSV")
        return [(int(n), float(dt), label, float(err),
                 None if rate == "" else float(rate))
                for n, dt, label, err, rate in reader]


_TABLE_BLOCKS = (
    ("Na", ("Na_i_L2", "Na_e_L2", "Na_i_H1", "Na_e_H1"),
     ("[Na]_i L2", "[Na]_e L2", "[Na]_i H1", "[Na]_e H1")),
    ("K", ("K_i_L2", "K_e_L2", "K_i_H1", "K_e_H1"),
     ("[K]_i L2", "[K]_e L2", "[K]_i H1", "[K]_e H1")),
    ("Cl", ("Cl_i_L2", "Cl_e_L2", "Cl_i_H1", "Cl_e_H1"),
     ("[Cl]_i L2", "[Cl]_e L2", "[Cl]_i H1", "[Cl]_e H1")),
    ("phi", ("phi_i_L2", "phi_e_L2", "phi_i_H1", "phi_e_H1"),
     ("phi_i L2", "phi_e L2", "phi_i H1", "phi_e H1")),
    ("I_M", ("I_M_L2",), ("I_M L2(Gamma)",)),
)


def format_entry(error, rate):
    return "%.2E(%s)" % (error, "-" if rate is None else "%.2f" % rate)


def format_convergence_table(report):
    """Aligned text: blocks of four-norm columns per unknown, then I_M."""
    rates = [None] + report.rates()
    width = 16
    out = []
    for _, labels, headers in _TABLE_BLOCKS:
        out.append(("n".ljust(6)
                    + "".join(h.ljust(width) for h in headers)).rstrip())
        for lev, rate in zip(report.levels, rates):
            row = str(lev.n).ljust(6)
            for lbl in labels:
                row += format_entry(
                    lev.errors[lbl],
                    None if rate is None else rate[lbl]).ljust(width)
            out.append(row.rstrip())
        out.append("")
    return "\n".join(out).rstrip() + "\n"


# -- manifest ---------------------------------------------------------------

def write_manifest(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
