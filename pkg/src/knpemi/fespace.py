"""Lagrange finite element spaces and sparse assembly on tagged meshes.

Spaces of degree 1 or 2 live either on the subset of mesh cells carrying
given tags (bulk spaces) or on an interface facet mesh (mortar space for
the membrane current). Meshes match on the interface, so the trace of a
bulk function onto the interface is a pure dof selection, built here as a
sparse trace map.

Assembly is vectorized over cells with quadrature rules from
:mod:`knpemi.quadrature`; variable coefficients enter as nodal fields of
the same space, interpolated to quadrature points. The block system
wrapper assembles named blocks into one sparse matrix, applies symmetric
Dirichlet elimination and solves with a direct sparse LU factorization,
enforcing a relative residual of 1e-10 as the solver contract.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GeometryError, SolverError
from .quadrature import simplex_rule

# local edges per topological dimension (vertex index pairs)
_EDGE_LOCAL = {
    1: [(0, 1)],
    2: [(1, 2), (0, 2), (0, 1)],
    3: [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
}


def _barycentric(tdim, pts):
    lam = np.empty((len(pts), tdim + 1))
    lam[:, 0] = 1.0 - pts.sum(axis=1)
    lam[:, 1:] = pts
    dlam = np.zeros((tdim + 1, tdim))
    dlam[0, :] = -1.0
    dlam[1:, :] = np.eye(tdim)
    return lam, dlam


def reference_basis(tdim, degree, pts):
    """Basis values and reference gradients at reference points.

    Returns (phi (nq, nloc), dphi (nq, nloc, tdim)). Local dof order is
    vertices first, then edge midpoints (degree 2).
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, tdim)
    lam, dlam = _barycentric(tdim, pts)
    nq, nv = lam.shape
    if degree == 1:
        phi = lam.copy()
        dphi = np.broadcast_to(dlam, (nq, nv, tdim)).copy()
        return phi, dphi
    if degree != 2:
        raise ValueError(f"unsupported polynomial degree {degree}")
    edges = _EDGE_LOCAL[tdim]
    nloc = nv + len(edges)
    phi = np.empty((nq, nloc))
    dphi = np.empty((nq, nloc, tdim))
    for a in range(nv):
        phi[:, a] = lam[:, a] * (2.0 * lam[:, a] - 1.0)
        dphi[:, a, :] = (4.0 * lam[:, a] - 1.0)[:, None] * dlam[a]
    for k, (a, b) in enumerate(edges):
        phi[:, nv + k] = 4.0 * lam[:, a] * lam[:, b]
        dphi[:, nv + k, :] = 4.0 * (lam[:, a][:, None] * dlam[b]
                                    + lam[:, b][:, None] * dlam[a])
    return phi, dphi


class FunctionSpace:
    """Continuous Lagrange space on a cell subset or a facet mesh.

    Fields are plain numpy arrays of nodal values aligned with this
    space's dof ordering: parent vertex ids ascending, then edges
    (degree 2) in lexicographic vertex-pair order.
    """

    def __init__(self, vertices, cells, degree, normals=None):
        cells = np.asarray(cells, dtype=np.int64)
        self.vertices = vertices
        self.cells = cells
        self.degree = int(degree)
        self.tdim = cells.shape[1] - 1
        self.gdim = vertices.shape[1]
        self.normals = normals  # per cell, for facet meshes

        vkeys = np.unique(cells)
        lookup = np.full(vertices.shape[0], -1, dtype=np.int64)
        lookup[vkeys] = np.arange(len(vkeys))
        self.vertex_keys = vkeys
        self._vertex_lookup = lookup

        if self.degree == 1:
            self.cell_dofs = lookup[cells]
            self.dof_coords = vertices[vkeys].copy()
            self.edge_keys = np.empty((0, 2), dtype=np.int64)
        elif self.degree == 2:
            edges = _EDGE_LOCAL[self.tdim]
            pairs = np.concatenate(
                [np.sort(cells[:, list(e)], axis=1) for e in edges], axis=0)
            uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
            nv = len(vkeys)
            edofs = (nv + inverse).reshape(len(edges), -1).T
            self.cell_dofs = np.concatenate([lookup[cells], edofs], axis=1)
            self.edge_keys = uniq
            mid = 0.5 * (vertices[uniq[:, 0]] + vertices[uniq[:, 1]])
            self.dof_coords = np.vstack([vertices[vkeys], mid])
        else:
            raise ValueError(f"unsupported polynomial degree {degree}")
        self.num_dofs = self.dof_coords.shape[0]

        self._geometry()
        self._edge_lookup_cache = None
        # quadrature-degree keyed caches; spaces are immutable so every
        # assembly over the same rule reuses identical arrays
        self._quad_cache = {}
        self._basis_cache = {}
        self._grad_cache = {}

    def _geometry(self):
        v = self.vertices[self.cells]
        J = np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))  # (nc, gdim, tdim)
        self._J = J
        if self.tdim == self.gdim:
            det = np.linalg.det(J)
            if np.any(det == 0):
                raise GeometryError("degenerate cell (zero Jacobian)")
            self._absdet = np.abs(det)
            self._invJ = np.linalg.inv(J)
        else:
            G = np.einsum("cdt,cds->cts", J, J)
            self._absdet = np.sqrt(np.linalg.det(G))
            self._invJ = None

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def quad_points(self, degree):
        """Physical quadrature points and scaled weights on every cell.

        Returns (points (nc, nq, gdim), wdet (nc, nq)).
        """
        if degree not in self._quad_cache:
            ref, w = simplex_rule(self.tdim, degree)
            x0 = self.vertices[self.cells[:, 0]]
            pts = x0[:, None, :] + np.einsum("cdt,qt->cqd", self._J, ref)
            self._quad_cache[degree] = (pts, np.outer(self._absdet, w))
        return self._quad_cache[degree]

    def basis_at(self, degree):
        """Reference basis evaluated on the quadrature rule of this degree."""
        if degree not in self._basis_cache:
            ref, _ = simplex_rule(self.tdim, degree)
            self._basis_cache[degree] = reference_basis(
                self.tdim, self.degree, ref)
        return self._basis_cache[degree]

    def physical_gradients(self, dphi):
        """Push reference gradients to physical space: (nc, nq, nloc, gdim)."""
        if self._invJ is None:
            raise GeometryError("gradients undefined on a facet space")
        key = (dphi.shape, dphi.tobytes())
        if key not in self._grad_cache:
            self._grad_cache[key] = np.einsum(
                "qat,ctd->cqad", dphi, self._invJ)
        return self._grad_cache[key]

    def values_at_quad(self, nodal, phi):
        """Nodal field interpolated at quadrature points: (nc, nq)."""
        return np.einsum("qa,ca->cq", phi, nodal[self.cell_dofs])

    def edge_lookup(self):
        if self._edge_lookup_cache is None:
            self._edge_lookup_cache = {
                (int(a), int(b)): len(self.vertex_keys) + i
                for i, (a, b) in enumerate(self.edge_keys)}
        return self._edge_lookup_cache

    def interpolate(self, fn):
        """Evaluate a callable of physical coordinates at the dof points."""
        return np.asarray(fn(self.dof_coords), dtype=float)


def build_space(mesh, degree, tags=None):
    """Bulk space on the cells whose tag is in ``tags`` (None = all cells)."""
    if tags is None:
        cells = mesh.cells
    else:
        tags = {tags} if np.isscalar(tags) else set(tags)
        mask = np.isin(mesh.cell_tags, list(tags))
        if not mask.any():
            raise GeometryError(f"no cells with tags {sorted(tags)}")
        cells = mesh.cells[mask]
    return FunctionSpace(mesh.vertices, cells, degree)


def build_interface_space(facetset, degree):
    """Mortar space on interface facets (facets act as cells)."""
    return FunctionSpace(facetset.mesh.vertices, facetset.facets, degree,
                         normals=facetset.normals)


def build_trace_map(ispace, bspace):
    """Sparse selection T with (T u_bulk)[i] = u_bulk at interface dof i.

    Requires the bulk space to contain every interface entity (matching
    meshes); raises GeometryError otherwise.
    """
    rows = np.arange(ispace.num_dofs)
    cols = np.empty(ispace.num_dofs, dtype=np.int64)
    bulk_v = bspace._vertex_lookup[ispace.vertex_keys]
    if np.any(bulk_v < 0):
        raise GeometryError("interface vertex missing from bulk space")
    cols[:len(bulk_v)] = bulk_v
    if ispace.degree == 2:
        lookup = bspace.edge_lookup()
        for i, (a, b) in enumerate(ispace.edge_keys):
            key = (int(a), int(b))
            if key not in lookup:
                raise GeometryError("interface edge missing from bulk space")
            cols[len(bulk_v) + i] = lookup[key]
    data = np.ones(ispace.num_dofs)
    return sp.csr_matrix((data, (rows, cols)),
                         shape=(ispace.num_dofs, bspace.num_dofs))


def facet_dofs(space, facetset):
    """Dofs of a bulk space lying on the given facets (for Dirichlet data)."""
    verts = np.unique(facetset.facets)
    dofs = space._vertex_lookup[verts]
    dofs = dofs[dofs >= 0]
    if space.degree == 2:
        d = facetset.facets.shape[1]
        pairs = []
        if d == 2:
            pairs.append(np.sort(facetset.facets, axis=1))
        else:
            for a, b in ((0, 1), (0, 2), (1, 2)):
                pairs.append(np.sort(facetset.facets[:, [a, b]], axis=1))
        pairs = np.unique(np.concatenate(pairs, axis=0), axis=0)
        lookup = space.edge_lookup()
        extra = [lookup[(int(a), int(b))] for a, b in pairs
                 if (int(a), int(b)) in lookup]
        dofs = np.concatenate([dofs, np.array(extra, dtype=np.int64)])
    return np.sort(dofs)


def assemble_matrix(space, kind, coeff=None, scale=1.0, quad_degree=4):
    """Mass or stiffness matrix, optionally with a variable coefficient.

    coeff may be None, a scalar, or a nodal field on the same space
    (interpolated to quadrature points). ``kind='stiffness'`` with a nodal
    coefficient is the linearized drift operator building block.
    """
    phi, dphi = space.basis_at(quad_degree)
    _, wdet = space.quad_points(quad_degree)
    if coeff is None:
        cq = wdet
    elif np.isscalar(coeff):
        cq = wdet * float(coeff)
    else:
        cq = wdet * space.values_at_quad(np.asarray(coeff, dtype=float), phi)
    if kind == "mass":
        local = np.einsum("cq,qa,qb->cab", cq, phi, phi)
    elif kind == "stiffness":
        grads = space.physical_gradients(dphi)
        if space.degree == 1:
            # affine cells: gradients are constant per cell, so the
            # quadrature axis collapses to the cell integral of cq
            g0 = grads[:, 0]
            local = np.einsum("c,cad,cbd->cab", cq.sum(axis=1), g0, g0)
        else:
            local = np.einsum("cq,cqad,cqbd->cab", cq, grads, grads)
    else:
        raise ValueError(f"unknown matrix kind '{kind}'")
    if scale != 1.0:
        local = local * scale
    nloc = local.shape[1]
    rows = np.repeat(space.cell_dofs, nloc, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, nloc)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)),
                         shape=(space.num_dofs, space.num_dofs))


def assemble_load(space, fn, scale=1.0, quad_degree=4):
    """Load vector of a callable of physical points: b[a] = scale INT f phi_a."""
    phi, _ = space.basis_at(quad_degree)
    pts, wdet = space.quad_points(quad_degree)
    vals = np.asarray(fn(pts.reshape(-1, space.gdim)), dtype=float)
    vals = vals.reshape(wdet.shape)
    local = np.einsum("cq,qa->ca", wdet * vals, phi) * scale
    b = np.zeros(space.num_dofs)
    np.add.at(b, space.cell_dofs, local)
    return b


def assemble_facet_load(ispace, fn, scale=1.0, quad_degree=4):
    """Facet load with normal-dependent data: fn(points, normals) -> values.

    The facet space's stored normals (one per facet) are broadcast to the
    quadrature points of each facet.
    """
    if ispace.normals is None:
        raise GeometryError("facet load needs a space built on a facet set")
    phi, _ = ispace.basis_at(quad_degree)
    pts, wdet = ispace.quad_points(quad_degree)
    nq = wdet.shape[1]
    nrm = np.repeat(ispace.normals, nq, axis=0)
    vals = np.asarray(fn(pts.reshape(-1, ispace.gdim), nrm), dtype=float)
    vals = vals.reshape(wdet.shape)
    local = np.einsum("cq,qa->ca", wdet * vals, phi) * scale
    b = np.zeros(ispace.num_dofs)
    np.add.at(b, ispace.cell_dofs, local)
    return b


def error_norm(space, nodal, exact=None, exact_grad=None, kind="L2",
               quad_degree=None):
    """L2 or H1 norm of a nodal field, or of its difference to a callable.

    On facet spaces this is the broken L2 norm (cellwise sum over facets),
    and ``exact`` is called with (points, normals) like facet loads.
    The default quadrature degree is 2 * degree + 2 per the verification
    contract.
    """
    if quad_degree is None:
        quad_degree = 2 * space.degree + 2
    phi, dphi = space.basis_at(quad_degree)
    pts, wdet = space.quad_points(quad_degree)
    uh = space.values_at_quad(np.asarray(nodal, dtype=float), phi)
    if exact is not None:
        flat = pts.reshape(-1, space.gdim)
        if space.normals is not None:
            nrm = np.repeat(space.normals, wdet.shape[1], axis=0)
            ex = exact(flat, nrm)
        else:
            ex = exact(flat)
        uh = uh - np.asarray(ex, dtype=float).reshape(wdet.shape)
    total = np.sum(wdet * uh ** 2)
    if kind == "H1":
        grads = space.physical_gradients(dphi)
        gh = np.einsum("cqad,ca->cqd", grads, nodal[space.cell_dofs])
        if exact_grad is not None:
            gex = np.asarray(exact_grad(pts.reshape(-1, space.gdim)), dtype=float)
            gh = gh - gex.reshape(gh.shape)
        total += np.sum(wdet * np.sum(gh ** 2, axis=2))
    elif kind != "L2":
        raise ValueError(f"unknown norm kind '{kind}'")
    return float(np.sqrt(total))


def evaluate(space, nodal, points):
    """Point evaluation by cell location (needs tdim == gdim).

    Points must lie in the space's cell subset (within a small tolerance);
    raises GeometryError otherwise.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if space._invJ is None:
        raise GeometryError("point evaluation on facet spaces is not supported")
    v0 = space.vertices[space.cells[:, 0]]
    out = np.empty(len(points))
    tol = 1e-10
    for i, p in enumerate(points):
        ref = np.einsum("ctd,cd->ct", space._invJ, p[None, :] - v0)
        lam0 = 1.0 - ref.sum(axis=1)
        ok = (ref.min(axis=1) >= -tol) & (lam0 >= -tol)
        hits = np.flatnonzero(ok)
        if len(hits) == 0:
            raise GeometryError(f"point {p.tolist()} lies outside the region")
        c = hits[0]
        phi, _ = reference_basis(space.tdim, space.degree, ref[c][None, :])
        out[i] = phi[0] @ nodal[space.cell_dofs[c]]
    return out


class BlockSystem:
    """Named-block sparse linear system with a direct-solve contract.

    Blocks are declared once with sizes; matrices accumulate into (row,
    col) positions; Dirichlet constraints are eliminated symmetrically
    (rows and columns zeroed, unit diagonal, right-hand side adjusted).
    ``solve`` factorizes with sparse LU and verifies the relative residual
    against the contract tolerance, raising SolverError on failure.
    """

    def __init__(self, sizes):
        self.names = list(sizes)
        self.sizes = {k: int(v) for k, v in sizes.items()}
        self.offsets = {}
        off = 0
        for k in self.names:
            self.offsets[k] = off
            off += self.sizes[k]
        self.total = off
        self._pieces = []
        self._rhs = np.zeros(self.total)
        self._dirichlet = []

    def add(self, row, col, mat, scale=1.0):
        mat = mat.tocoo()
        if mat.shape != (self.sizes[row], self.sizes[col]):
            raise ValueError(
                f"block ({row},{col}) expects shape "
                f"({self.sizes[row]},{self.sizes[col]}), got {mat.shape}")
        data = mat.data * scale if scale != 1.0 else mat.data
        self._pieces.append((mat.row + self.offsets[row],
                             mat.col + self.offsets[col], data))

    def add_rhs(self, name, vec):
        off = self.offsets[name]
        self._rhs[off:off + self.sizes[name]] += vec

    def set_dirichlet(self, name, dofs, values):
        dofs = np.asarray(dofs, dtype=np.int64)
        values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
        self._dirichlet.append((self.offsets[name] + dofs, values.copy()))

    def assemble(self):
        rows = np.concatenate([p[0] for p in self._pieces])
        cols = np.concatenate([p[1] for p in self._pieces])
        data = np.concatenate([p[2] for p in self._pieces])
        A = sp.coo_matrix((data, (rows, cols)),
                          shape=(self.total, self.total)).tocsr()
        b = self._rhs.copy()
        if self._dirichlet:
            g = np.concatenate([d[0] for d in self._dirichlet])
            vals = np.concatenate([d[1] for d in self._dirichlet])
            xc = np.zeros(self.total)
            xc[g] = vals
            b -= A @ xc
            free = np.ones(self.total)
            free[g] = 0.0
            Z = sp.diags(free)
            pin = sp.diags(1.0 - free)
            A = Z @ A @ Z + pin
            b[g] = vals
        return A, b

    def solve(self, residual_tol=1e-10, reuse=None):
        """Direct solve with iterative refinement.

        Refinement serves two purposes: it recovers the digits plain LU
        loses on badly scaled blocks (SI units mix 1e-14 .. 1e2 entries),
        and it lets a factorization cached in ``reuse`` (a plain dict the
        caller keeps across time steps) act as a preconditioner for the
        slightly drifted matrix of the next step, skipping most
        refactorizations. Accuracy is unchanged: the same residual
        contract is enforced either way, with a fresh factorization as
        the fallback.
        """
        A, b = self.assemble()
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            bnorm = 1.0
        x = res = None
        if reuse is not None and reuse.get("n") == A.shape[0] \
                and reuse.get("lu") is not None:
            x, res = _refine(reuse["lu"], A, b, bnorm, residual_tol)
            if res > residual_tol:
                x = None
        if x is None:
            try:
                lu = spla.splu(A.tocsc())
            except RuntimeError as exc:
                raise SolverError(
                    f"sparse LU factorization failed: {exc}") from exc
            if reuse is not None:
                reuse["lu"] = lu
                reuse["n"] = A.shape[0]
            x, res = _refine(lu, A, b, bnorm, residual_tol)
        if not np.isfinite(res) or res > residual_tol:
            worst = self._residual_by_block(A, x, b)
            raise SolverError(
                f"direct solve residual {res:.3e} exceeds {residual_tol:.1e} "
                f"(worst block: {worst})")
        return {k: x[self.offsets[k]:self.offsets[k] + self.sizes[k]]
                for k in self.names}

    def _residual_by_block(self, A, x, b):
        r = np.abs(A @ x - b)
        name = max(self.names,
                   key=lambda k: r[self.offsets[k]:
                                   self.offsets[k] + self.sizes[k]].max(initial=0))
        return name


def _refine(lu, A, b, bnorm, residual_tol, max_sweeps=12):
    """Refine lu.solve(b) toward A x = b; returns (x, relative residual).

    Stops early once well under the tolerance or when progress stalls
    (preconditioner too stale), leaving the caller to refactorize.
    """
    x = lu.solve(b)
    res = np.linalg.norm(A @ x - b) / bnorm
    for _ in range(max_sweeps):
        if not np.isfinite(res) or res <= 0.01 * residual_tol:
            break
        dx = lu.solve(b - A @ x)
        if not np.isfinite(dx).all():
            break
        x_new = x + dx
        res_new = np.linalg.norm(A @ x_new - b) / bnorm
        if res_new >= 0.5 * res:
            if res_new < res:
                x, res = x_new, res_new
            break
        x, res = x_new, res_new
    return x, res
