"""Mesh generation, tagging and interface extraction."""

import numpy as np
import pytest

from knpemi.errors import ConfigurationError, GeometryError
from knpemi.geometry import (build_box_mesh, exterior_boundary,
                             extract_interface, tag_subdomains)


def unit_square(n, box=None):
    mesh = build_box_mesh([(0.0, 1.0), (0.0, 1.0)], [n, n])
    if box is not None:
        mesh = tag_subdomains(mesh, {1: box})
    return mesh


class TestBoxMesh2D:
    def test_counts(self):
        mesh = build_box_mesh([(0.0, 1.0), (0.0, 1.0)], [4, 3])
        assert mesh.num_cells == 2 * 4 * 3
        assert mesh.num_vertices == 5 * 4

    def test_model_domain_counts(self):
        # 60 x 60 um domain at 2 um resolution
        mesh = build_box_mesh([(0.0, 60.0), (0.0, 60.0)], [30, 30])
        assert mesh.num_cells == 1800
        assert mesh.num_vertices == 961

    def test_total_area(self):
        mesh = build_box_mesh([(0.0, 60.0), (0.0, 30.0)], [12, 7])
        assert np.isclose(mesh.cell_volumes().sum(), 1800.0, rtol=1e-12)

    def test_positive_orientation(self):
        mesh = unit_square(5)
        v = mesh.vertices[mesh.cells]
        a, b = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        assert np.all(cross > 0)

    def test_rejects_empty_extent(self):
        with pytest.raises(ConfigurationError, match="axis 'x'"):
            build_box_mesh([(1.0, 1.0), (0.0, 1.0)], [2, 2])


class TestBoxMesh3D:
    def test_counts(self):
        mesh = build_box_mesh([(0, 1), (0, 1), (0, 1)], [2, 3, 4])
        assert mesh.num_cells == 6 * 2 * 3 * 4
        assert mesh.num_vertices == 3 * 4 * 5

    def test_total_volume(self):
        mesh = build_box_mesh([(0, 2), (0, 3), (0, 5)], [3, 2, 4])
        assert np.isclose(mesh.cell_volumes().sum(), 30.0, rtol=1e-12)

    def test_positive_volumes(self):
        mesh = build_box_mesh([(0, 1), (0, 1), (0, 1)], [2, 2, 2])
        v = mesh.vertices[mesh.cells]
        det = np.linalg.det(v[:, 1:] - v[:, :1])
        assert np.all(det > 0)

    def test_boundary_facet_count(self):
        mesh = build_box_mesh([(0, 1), (0, 1), (0, 1)], [2, 2, 2])
        bnd = exterior_boundary(mesh)
        # 6 faces x 4 squares x 2 triangles
        assert bnd.num_facets == 48
        assert np.isclose(bnd.measures().sum(), 6.0, rtol=1e-12)


class TestTagging:
    def test_tagged_cell_count_and_measure(self):
        mesh = unit_square(16, box=[(0.25, 0.75), (0.25, 0.75)])
        assert np.sum(mesh.cell_tags == 1) == 128
        vols = mesh.cell_volumes()
        assert np.isclose(vols[mesh.cell_tags == 1].sum(), 0.25, rtol=1e-12)
        assert np.isclose(vols[mesh.cell_tags == 0].sum(), 0.75, rtol=1e-12)

    def test_misaligned_box_names_axis(self):
        mesh = unit_square(16)
        with pytest.raises(ConfigurationError, match="axis 'y'"):
            tag_subdomains(mesh, {1: [(0.25, 0.75), (0.25, 0.7001)]})

    def test_box_touching_boundary_rejected(self):
        mesh = unit_square(16)
        with pytest.raises(ConfigurationError, match="boundary"):
            tag_subdomains(mesh, {1: [(0.0, 0.5), (0.25, 0.75)]})

    def test_overlapping_boxes_rejected(self):
        mesh = unit_square(16)
        with pytest.raises(ConfigurationError, match="overlap"):
            tag_subdomains(mesh, {1: [(0.25, 0.75), (0.25, 0.75)],
                                  2: [(0.5, 0.875), (0.25, 0.75)]})

    def test_3d_tagging(self):
        mesh = build_box_mesh([(0, 1)] * 3, [4, 4, 4])
        mesh = tag_subdomains(mesh, {1: [(0.25, 0.75)] * 3})
        assert np.sum(mesh.cell_tags == 1) == 6 * 8
        vols = mesh.cell_volumes()
        assert np.isclose(vols[mesh.cell_tags == 1].sum(), 0.125, rtol=1e-12)


class TestInterface:
    def test_facet_count_and_length(self):
        mesh = unit_square(16, box=[(0.25, 0.75), (0.25, 0.75)])
        gamma = extract_interface(mesh)
        assert gamma.num_facets == 32
        assert np.isclose(gamma.measures().sum(), 2.0, rtol=1e-12)

    def test_normals_point_out_of_tagged_region(self):
        mesh = unit_square(8, box=[(0.25, 0.75), (0.25, 0.75)])
        gamma = extract_interface(mesh)
        assert np.allclose(np.linalg.norm(gamma.normals, axis=1), 1.0)
        centers = mesh.vertices[gamma.facets].mean(axis=1)
        inner = mesh.vertices[mesh.cells[gamma.inside_cells]].mean(axis=1)
        assert np.all(np.einsum("fd,fd->f", gamma.normals, centers - inner) > 0)
        # outward from the box center as well
        assert np.all(np.einsum("fd,fd->f", gamma.normals,
                                centers - 0.5) > 0)

    def test_labels_and_two_cells(self):
        mesh = build_box_mesh([(0, 120), (0, 120)], [60, 60])
        mesh = tag_subdomains(mesh, {1: [(34, 84), (52, 58)],
                                     2: [(34, 84), (62, 68)]})
        gamma = extract_interface(mesh)
        for label, (w, h) in [(1, (50, 6)), (2, (50, 6))]:
            sel = gamma.labels == label
            assert np.isclose(gamma.measures()[sel].sum(), 2 * (w + h))

    def test_touching_cells_raise(self):
        mesh = unit_square(8)
        mesh = tag_subdomains(mesh, {1: [(0.25, 0.5), (0.25, 0.75)],
                                     2: [(0.5, 0.75), (0.25, 0.75)]})
        with pytest.raises(GeometryError, match="share a facet"):
            extract_interface(mesh)

    def test_no_interface_raises(self):
        with pytest.raises(GeometryError):
            extract_interface(unit_square(4))

    def test_deterministic(self):
        mesh = unit_square(16, box=[(0.25, 0.75), (0.25, 0.75)])
        g1 = extract_interface(mesh)
        g2 = extract_interface(mesh)
        assert np.array_equal(g1.facets, g2.facets)
        assert np.array_equal(g1.normals, g2.normals)

    def test_3d_interface_area(self):
        mesh = build_box_mesh([(0, 1)] * 3, [4, 4, 4])
        mesh = tag_subdomains(mesh, {1: [(0.25, 0.75)] * 3})
        gamma = extract_interface(mesh)
        # 6 faces x 4 squares x 2 triangles
        assert gamma.num_facets == 48
        assert np.isclose(gamma.measures().sum(), 6 * 0.25, rtol=1e-12)


class TestExteriorBoundary:
    def test_counts_and_normals(self):
        mesh = unit_square(4)
        bnd = exterior_boundary(mesh)
        assert bnd.num_facets == 16
        assert np.isclose(bnd.measures().sum(), 4.0)
        centers = mesh.vertices[bnd.facets].mean(axis=1)
        assert np.all(np.einsum("fd,fd->f", bnd.normals, centers - 0.5) > 0)
