"""Output formats: probe CSV, legacy VTK snapshots, convergence files."""

import numpy as np
import pytest

from knpemi import ConfigurationError, output
from knpemi.geometry import build_box_mesh, tag_subdomains
from knpemi.mms import ConvergenceLevel, ConvergenceReport
from knpemi.output import (
    ProbeRecord,
    format_convergence_table,
    probe_grid,
    read_convergence_csv,
    read_probes,
    read_vtk,
    scatter_point_field,
    to_report_units,
    write_convergence_csv,
    write_probes,
    write_vtk,
)
from knpemi.fespace import build_space


def small_mesh():
    mesh = build_box_mesh(((0.0, 4e-6), (0.0, 3e-6)), (4, 3))
    return tag_subdomains(mesh, {1: ((1e-6, 3e-6), (1e-6, 2e-6))})


def test_report_units():
    assert to_report_units("phi_e", 0.001) == pytest.approx(1.0)
    assert to_report_units("E_Na", np.array([0.05]))[0] == pytest.approx(50.0)
    assert to_report_units("I_M", 1.0) == pytest.approx(100.0)
    assert to_report_units("Na_e", 12.0) == pytest.approx(12.0)
    assert to_report_units("n", 0.3) == pytest.approx(0.3)


def test_probe_csv_round_trip(tmp_path):
    records = [ProbeRecord(0.0, "p1", "phi_e", -0.123456789),
               ProbeRecord(0.1, "p1", "phi_e", 42.0),
               ProbeRecord(0.1, "p2", "Na_e", 99.99999999)]
    path = tmp_path / "probes.csv"
    write_probes(records, path)
    assert read_probes(path) == records


def test_empty_probe_list_writes_header_only(tmp_path):
    path = tmp_path / "probes.csv"
    write_probes([], path)
    assert path.read_text() == "time_ms,probe,field,value\n"
    assert read_probes(path) == []


def test_reading_a_non_probe_csv_fails(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigurationError, match="not a probe CSV"):
        read_probes(path)


def test_vtk_round_trip(tmp_path):
    mesh = small_mesh()
    field = np.linspace(-1.0, 1.0, mesh.num_vertices)
    masked = field.copy()
    masked[0] = np.nan
    path = tmp_path / "snap.vtk"
    write_vtk(path, mesh, {"phi_e": field, "Na_i": masked}, title="test")
    grid = read_vtk(path)
    assert grid.cell_type == 5
    assert grid.points.shape == (mesh.num_vertices, 3)
    # coordinates come back in µm
    assert grid.points[:, 0].max() == pytest.approx(4.0)
    np.testing.assert_array_equal(grid.cells, mesh.cells)
    np.testing.assert_array_equal(grid.cell_data["region"], mesh.cell_tags)
    np.testing.assert_allclose(grid.point_data["phi_e"], field, rtol=1e-9)
    assert np.isnan(grid.point_data["Na_i"][0])


def test_vtk_rejects_misshapen_point_data(tmp_path):
    mesh = small_mesh()
    with pytest.raises(ConfigurationError, match="shape"):
        write_vtk(tmp_path / "x.vtk", mesh, {"phi_e": np.zeros(3)})


def test_scatter_fills_off_region_with_nan():
    mesh = small_mesh()
    V_i = build_space(mesh, 1, tags=1)
    nodal = np.arange(V_i.num_dofs, dtype=float)
    full = scatter_point_field(V_i, nodal, mesh.num_vertices)
    assert np.isfinite(full[V_i.vertex_keys]).all()
    outside = np.setdiff1d(np.arange(mesh.num_vertices), V_i.vertex_keys)
    assert np.isnan(full[outside]).all()


def test_probe_grid_interpolates_and_prefers_finite_cells(tmp_path):
    mesh = small_mesh()
    V_i = build_space(mesh, 1, tags=1)
    V_e = build_space(mesh, 1, tags=0)
    f_i = scatter_point_field(V_i, np.full(V_i.num_dofs, 7.0),
                              mesh.num_vertices)
    f_e = scatter_point_field(V_e, V_e.dof_coords[:, 0] * 1e6,
                              mesh.num_vertices)
    path = tmp_path / "snap.vtk"
    write_vtk(path, mesh, {"c_i": f_i, "x_e": f_e})
    grid = read_vtk(path)
    # interior point of the tagged region, off vertex
    assert probe_grid(grid, "c_i", [(1.5, 1.25)])[0] == pytest.approx(7.0)
    # membrane vertex: the intracellular field must come from inside
    assert probe_grid(grid, "c_i", [(1.0, 1.0)])[0] == pytest.approx(7.0)
    # linear field reproduced exactly between vertices
    assert probe_grid(grid, "x_e", [(2.5, 0.5)])[0] == pytest.approx(2.5)
    with pytest.raises(ConfigurationError, match="outside the grid"):
        probe_grid(grid, "x_e", [(9.0, 9.0)])
    with pytest.raises(ConfigurationError, match="not in snapshot"):
        probe_grid(grid, "nope", [(1.0, 1.0)])


def fake_report():
    labels = ConvergenceReport.ERROR_LABELS
    lev0 = ConvergenceLevel(n=8, h=1 / 8, dt=1e-7, num_steps=2,
                            errors={lbl: 1.0 for lbl in labels})
    lev1 = ConvergenceLevel(n=16, h=1 / 16, dt=2.5e-8, num_steps=8,
                            errors={lbl: 0.25 for lbl in labels})
    return ConvergenceReport(levels=(lev0, lev1))


def test_convergence_csv_round_trip(tmp_path):
    report = fake_report()
    path = tmp_path / "convergence.csv"
    write_convergence_csv(report, path)
    rows = read_convergence_csv(path)
    assert len(rows) == 2 * len(ConvergenceReport.ERROR_LABELS)
    first = rows[0]
    assert first[0] == 8 and first[4] is None
    by_key = {(n, lbl): (err, rate) for n, _, lbl, err, rate in rows}
    err, rate = by_key[(16, "phi_i_L2")]
    assert err == pytest.approx(0.25)
    assert rate == pytest.approx(2.0)


def test_convergence_table_layout():
    table = format_convergence_table(fake_report())
    lines = table.splitlines()
    # five blocks: one per ion, the potentials, the membrane current
    headers = [ln for ln in lines if ln.startswith("n")]
    assert len(headers) == 5
    assert "[Na]_i L2" in headers[0]
    assert "I_M" in headers[4]
    row8 = [ln for ln in lines if ln.startswith("8")][0]
    assert "1.00E+00(-)" in row8
    row16 = [ln for ln in lines if ln.startswith("16")][0]
    assert "2.50E-01(2.00)" in row16
    assert not any(ln != ln.rstrip() for ln in lines)
