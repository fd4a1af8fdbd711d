"""Structured simplicial box meshes with tagged subdomains.

Meshes are axis-aligned boxes divided into a regular grid; each grid
rectangle is split into two triangles (diagonal from the low corner to the
high corner) and each grid box into six tetrahedra sharing the main
diagonal (Kuhn subdivision, conforming across neighbours). Cell tag 0 is
extracellular; positive tags enumerate cells (in the biological sense).
The interface between a tagged region and the extracellular space is
extracted as a facet mesh with normals pointing out of the tagged region.

Coordinates carry whatever length unit the caller supplies; scenario
configs pass micrometres and convert to SI before assembly.
"""

from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np

from .errors import ConfigurationError, GeometryError

_AXIS_NAMES = "xyz"


@dataclass(frozen=True)
class Mesh:
    """Simplicial mesh with integer cell tags (0 = extracellular)."""

    vertices: np.ndarray  # (num_vertices, dim)
    cells: np.ndarray  # (num_cells, dim + 1) vertex indices
    cell_tags: np.ndarray  # (num_cells,) int

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.cell_tags):
            arr.setflags(write=False)

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def cell_volumes(self):
        """Unsigned cell measures (areas in 2D, volumes in 3D)."""
        v = self.vertices[self.cells]
        edges = v[:, 1:, :] - v[:, :1, :]
        if self.dim == 1:
            det = edges[:, 0, 0]
        elif self.dim == 2:
            det = np.linalg.det(edges)
        else:
            det = np.linalg.det(edges)
        from math import factorial

        return np.abs(det) / factorial(self.dim)

    def with_tags(self, tags):
        return Mesh(self.vertices, self.cells, np.asarray(tags, dtype=np.int64))


@dataclass(frozen=True)
class FacetSet:
    """Oriented facets of a mesh: the membrane interface or the exterior boundary.

    Facets are (dim) vertex-index tuples sorted ascending, listed in
    lexicographic order for determinism. Normals are unit vectors; for the
    interface they point out of the tagged (intracellular) cell, for the
    exterior boundary out of the domain. ``labels`` carries the tag of the
    adjacent intracellular cell (0 on the exterior boundary).
    """

    mesh: Mesh
    facets: np.ndarray  # (num_facets, dim) vertex indices
    normals: np.ndarray  # (num_facets, dim)
    inside_cells: np.ndarray  # (num_facets,) adjacent tagged cell (or the only cell)
    outside_cells: np.ndarray  # (num_facets,) adjacent untagged cell, -1 on boundary
    labels: np.ndarray  # (num_facets,) region label

    def __post_init__(self):
        for arr in (self.facets, self.normals, self.inside_cells,
                    self.outside_cells, self.labels):
            arr.setflags(write=False)

    @property
    def num_facets(self):
        return self.facets.shape[0]

    def measures(self):
        """Facet lengths (2D parent) or areas (3D parent)."""
        v = self.mesh.vertices[self.facets]
        if self.facets.shape[1] == 2:
            return np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        a = v[:, 1] - v[:, 0]
        b = v[:, 2] - v[:, 0]
        return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def build_box_mesh(extents, resolution):
    """Mesh an axis-aligned box with a structured simplicial grid.

    Parameters
    ----------
    extents : sequence of (lo, hi) per axis (2 or 3 axes).
    resolution : cells per axis, positive ints.

    Returns a Mesh with all tags 0. Vertex ordering is lexicographic with
    the x index fastest, so meshes are reproducible.
    """
    extents = [tuple(map(float, e)) for e in extents]
    resolution = [int(r) for r in resolution]
    dim = len(extents)
    if dim not in (2, 3):
        raise ConfigurationError(f"box mesh needs 2 or 3 axes, got {dim}")
    if len(resolution) != dim:
        raise ConfigurationError(
            f"resolution has {len(resolution)} entries for a {dim}D box")
    for a, ((lo, hi), r) in enumerate(zip(extents, resolution)):
        if not hi > lo:
            raise ConfigurationError(
                f"empty extent on axis '{_AXIS_NAMES[a]}': [{lo}, {hi}]")
        if r < 1:
            raise ConfigurationError(
                f"resolution on axis '{_AXIS_NAMES[a]}' must be >= 1, got {r}")

    axes = [np.linspace(lo, hi, r + 1) for (lo, hi), r in zip(extents, resolution)]
    if dim == 2:
        return _box_mesh_2d(axes, resolution)
    return _box_mesh_3d(axes, resolution)


def _box_mesh_2d(axes, resolution):
    nx, ny = resolution
    X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    v00 = (iy * (nx + 1) + ix).ravel()
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    # diagonal v00 -> v11, both triangles counterclockwise
    tri1 = np.column_stack([v00, v10, v11])
    tri2 = np.column_stack([v00, v11, v01])
    cells = np.vstack([tri1, tri2])
    # interleave so the two halves of a rectangle are adjacent in index
    order = np.arange(2 * nx * ny).reshape(2, -1).T.ravel()
    cells = cells[order]
    return Mesh(vertices, cells.astype(np.int64),
                np.zeros(cells.shape[0], dtype=np.int64))


_KUHN_PERMS = list(permutations(range(3)))


def _box_mesh_3d(axes, resolution):
    nx, ny, nz = resolution
    X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    # vertex index (ix, iy, iz) -> ((iz * (ny+1)) + iy) * (nx+1) + ix
    vertices = np.column_stack([
        np.transpose(X, (2, 1, 0)).ravel(),
        np.transpose(Y, (2, 1, 0)).ravel(),
        np.transpose(Z, (2, 1, 0)).ravel(),
    ])

    def vid(ix, iy, iz):
        return (iz * (ny + 1) + iy) * (nx + 1) + ix

    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
    base = np.stack([ix, iy, iz], axis=1)  # (nb, 3) low corner of each box

    unit = np.eye(3, dtype=np.int64)
    tets = []
    for perm in _KUHN_PERMS:
        # walk from the low corner to the high corner adding unit steps
        p0 = base
        p1 = p0 + unit[perm[0]]
        p2 = p1 + unit[perm[1]]
        p3 = p2 + unit[perm[2]]
        tet = np.stack([
            vid(p[:, 0], p[:, 1], p[:, 2]) for p in (p0, p1, p2, p3)
        ], axis=1)
        # odd permutations give negative volume; swap two vertices
        parity = sum(1 for i, j in combinations(range(3), 2)
                     if perm[i] > perm[j]) % 2
        if parity:
            tet = tet[:, [0, 2, 1, 3]]
        tets.append(tet)
    cells = np.stack(tets, axis=1).reshape(-1, 4)
    return Mesh(vertices, cells.astype(np.int64),
                np.zeros(cells.shape[0], dtype=np.int64))


def _grid_values(mesh, axis):
    return np.unique(mesh.vertices[:, axis])


def tag_subdomains(mesh, boxes):
    """Tag cells whose centroid lies inside axis-aligned boxes.

    Parameters
    ----------
    mesh : Mesh
    boxes : dict mapping positive int label -> sequence of (lo, hi) per axis.

    Box faces must coincide with mesh grid planes, boxes must be pairwise
    disjoint (touching is allowed and caught later at interface
    extraction), and must not touch the exterior boundary.
    """
    dim = mesh.dim
    span = float(np.max(mesh.vertices) - np.min(mesh.vertices)) or 1.0
    tol = 1e-9 * span
    domain = [(mesh.vertices[:, a].min(), mesh.vertices[:, a].max())
              for a in range(dim)]

    boxes = {int(label): [tuple(map(float, iv)) for iv in box]
             for label, box in boxes.items()}
    for label, box in boxes.items():
        if label <= 0:
            raise ConfigurationError(f"subdomain label must be positive, got {label}")
        if len(box) != dim:
            raise ConfigurationError(
                f"subdomain {label} has {len(box)} axis intervals for a {dim}D mesh")
        for a, (lo, hi) in enumerate(box):
            name = _AXIS_NAMES[a]
            if not hi > lo:
                raise ConfigurationError(
                    f"subdomain {label}: empty interval on axis '{name}'")
            grid = _grid_values(mesh, a)
            for val in (lo, hi):
                if np.min(np.abs(grid - val)) > tol:
                    raise ConfigurationError(
                        f"subdomain {label} is not aligned with the mesh grid "
                        f"on axis '{name}' (plane {val})")
            dlo, dhi = domain[a]
            if lo <= dlo + tol or hi >= dhi - tol:
                raise ConfigurationError(
                    f"subdomain {label} touches the domain boundary on axis '{name}'")

    labels = sorted(boxes)
    for i, li in enumerate(labels):
        for lj in labels[i + 1:]:
            if all(boxes[li][a][0] < boxes[lj][a][1] - tol
                   and boxes[lj][a][0] < boxes[li][a][1] - tol
                   for a in range(dim)):
                raise ConfigurationError(
                    f"subdomains {li} and {lj} overlap")

    centroids = mesh.vertices[mesh.cells].mean(axis=1)
    tags = np.zeros(mesh.num_cells, dtype=np.int64)
    for label in labels:
        inside = np.ones(mesh.num_cells, dtype=bool)
        for a, (lo, hi) in enumerate(boxes[label]):
            inside &= (centroids[:, a] > lo) & (centroids[:, a] < hi)
        tags[inside] = label
    return mesh.with_tags(tags)


def _cell_facets(cells):
    """All facets of each cell as sorted vertex tuples.

    Returns (facets (num_cells * (d+1), d), cell index per facet).
    """
    nc, nv = cells.shape
    combos = list(combinations(range(nv), nv - 1))
    facets = np.concatenate([cells[:, list(c)] for c in combos], axis=0)
    owners = np.tile(np.arange(nc), len(combos))
    facets = np.sort(facets, axis=1)
    return facets, owners


def _group_facets(mesh):
    """Group identical facets; returns (unique facets, list of owner arrays)."""
    facets, owners = _cell_facets(mesh.cells)
    order = np.lexsort(facets.T[::-1])
    facets, owners = facets[order], owners[order]
    change = np.ones(len(facets), dtype=bool)
    change[1:] = np.any(facets[1:] != facets[:-1], axis=1)
    starts = np.flatnonzero(change)
    counts = np.diff(np.append(starts, len(facets)))
    return facets[starts], owners, starts, counts


def _facet_normal(mesh, facet, cell):
    """Unit normal of a facet of a cell, pointing away from the cell."""
    verts = mesh.vertices
    pts = verts[facet]
    opposite = [v for v in mesh.cells[cell] if v not in set(facet)][0]
    if mesh.dim == 2:
        t = pts[1] - pts[0]
        n = np.array([t[1], -t[0]])
    else:
        n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    n = n / np.linalg.norm(n)
    if np.dot(n, verts[opposite] - pts[0]) > 0:
        n = -n
    return n


def extract_interface(mesh):
    """Facets separating tagged cells from the extracellular region.

    Normals point out of the tagged region. A facet shared by two cells
    with distinct positive tags means two cells touch, which the membrane
    model cannot represent; that raises GeometryError.
    """
    facets, owners, starts, counts = _group_facets(mesh)
    tags = mesh.cell_tags

    rows, normals, inside, outside, labels = [], [], [], [], []
    for f, s, c in zip(facets, starts, counts):
        if c != 2:
            continue
        c0, c1 = owners[s], owners[s + 1]
        t0, t1 = tags[c0], tags[c1]
        if t0 == t1:
            continue
        if t0 > 0 and t1 > 0:
            raise GeometryError(
                f"cells {t0} and {t1} share a facet; intracellular regions "
                "must be separated by extracellular space")
        cin, cout = (c0, c1) if t0 > 0 else (c1, c0)
        rows.append(f)
        normals.append(_facet_normal(mesh, f, cin))
        inside.append(cin)
        outside.append(cout)
        labels.append(tags[cin])

    if not rows:
        raise GeometryError("mesh has no tagged subdomain interface")
    return FacetSet(mesh, np.array(rows, dtype=np.int64), np.array(normals),
                    np.array(inside, dtype=np.int64),
                    np.array(outside, dtype=np.int64),
                    np.array(labels, dtype=np.int64))


def exterior_boundary(mesh):
    """Facets on the domain boundary with outward normals (labels all 0)."""
    facets, owners, starts, counts = _group_facets(mesh)
    rows, normals, inside = [], [], []
    for f, s, c in zip(facets, starts, counts):
        if c != 1:
            continue
        cell = owners[s]
        rows.append(f)
        normals.append(_facet_normal(mesh, f, cell))
        inside.append(cell)
    arr = np.array(rows, dtype=np.int64)
    return FacetSet(mesh, arr, np.array(normals),
                    np.array(inside, dtype=np.int64),
                    np.full(len(rows), -1, dtype=np.int64),
                    np.zeros(len(rows), dtype=np.int64))
