"""Structured triangulation of the diode cross-section and P1 finite elements.

The domain is the square (-1, 1)^2.  Each of the ``nx * ny`` grid squares is
split along its lower-left to upper-right diagonal, so every element is a
right triangle and the stiffness matrix of a positive coefficient is an
M-matrix.

Node ``k`` sits at grid position ``(i, j)`` with ``k = j * (nx + 1) + i``
(row-major by y, then x).
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import CoefficientDomainError, DomainError, SolverError

logger = logging.getLogger(__name__)

GAMMA_N = "GammaN"
GAMMA_P = "GammaP"
NEUMANN_LEFT = "NeumannLeft"
NEUMANN_RIGHT = "NeumannRight"
INTERIOR = "Interior"
OMEGA_N = "OmegaN"
OMEGA_P = "OmegaP"

SOLVER_RTOL = 1e-10

# 7-point degree-5 rule on the reference triangle (barycentric coords, weights)
_QUAD_A1, _QUAD_B1 = 0.059715871789770, 0.470142064105115
_QUAD_A2, _QUAD_B2 = 0.797426985353087, 0.101286507323456
_QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_QUAD_A1, _QUAD_B1, _QUAD_B1],
    [_QUAD_B1, _QUAD_A1, _QUAD_B1],
    [_QUAD_B1, _QUAD_B1, _QUAD_A1],
    [_QUAD_A2, _QUAD_B2, _QUAD_B2],
    [_QUAD_B2, _QUAD_A2, _QUAD_B2],
    [_QUAD_B2, _QUAD_B2, _QUAD_A2],
])
_QUAD_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured right-triangle mesh of (-1, 1)^2.

    Attributes
    ----------
    nx, ny : int
        Number of grid squares in x and y.
    nodes : ndarray, shape (n_nodes, 2)
    triangles : ndarray, shape (n_triangles, 3)
        Counter-clockwise node-index triples.
    boundary_tags : ndarray of str, shape (n_nodes,)
    region_tags : ndarray of str, shape (n_nodes,)
        ``OmegaN`` for y >= 0, ``OmegaP`` for y < 0.
    triangle_regions : ndarray of str, shape (n_triangles,)
    """

    nx: int
    ny: int
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_tags: np.ndarray = field(repr=False)
    region_tags: np.ndarray = field(repr=False)
    triangle_regions: np.ndarray = field(repr=False)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def hx(self):
        return 2.0 / self.nx

    @property
    def hy(self):
        return 2.0 / self.ny

    @cached_property
    def gamma_n(self):
        """Top-contact node indices ordered by increasing x."""
        return np.flatnonzero(self.boundary_tags == GAMMA_N)

    @cached_property
    def gamma_p(self):
        """Bottom-contact node indices ordered by increasing x."""
        return np.flatnonzero(self.boundary_tags == GAMMA_P)

    @cached_property
    def contact_nodes(self):
        return np.concatenate([self.gamma_p, self.gamma_n])

    @cached_property
    def areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def basis_gradients(self):
        """Constant gradients of the three P1 basis functions, shape (T, 3, 2)."""
        p = self.nodes[self.triangles]
        x, y = p[..., 0], p[..., 1]
        twice_area = 2.0 * self.areas
        grads = np.empty((self.n_triangles, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (y[:, b] - y[:, c]) / twice_area
            grads[:, a, 1] = (x[:, c] - x[:, b]) / twice_area
        return grads

    @cached_property
    def reference_stiffness(self):
        """Element stiffness matrices for a unit coefficient, shape (T, 3, 3)."""
        g = self.basis_gradients
        return self.areas[:, None, None] * np.einsum("tad,tbd->tab", g, g)

    @cached_property
    def lumped_mass(self):
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.triangles, np.repeat(self.areas[:, None] / 3.0, 3, axis=1))
        return out

    @cached_property
    def mesh_hash(self):
        h = hashlib.sha256()
        h.update(f"{self.nx}x{self.ny}".encode())
        h.update(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def grid_index(self, i, j):
        return j * (self.nx + 1) + i


def build_mesh(nx, ny):
    """Triangulate (-1, 1)^2 with ``nx * ny`` squares split into right triangles.

    Contact nodes (top and bottom edges, corners included) are tagged before
    the Neumann sides, so Dirichlet wins at the corners.  Junction nodes on
    y = 0 belong to the n-region.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise DomainError(f"mesh subdivisions must be positive integers, got ({nx}, {ny})")
    nx, ny = int(nx), int(ny)

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    ii, jj = ii.ravel(), jj.ravel()
    nodes = np.column_stack([np.linspace(-1.0, 1.0, nx + 1)[ii],
                             np.linspace(-1.0, 1.0, ny + 1)[jj]])

    si, sj = np.meshgrid(np.arange(nx), np.arange(ny))
    ll = (sj * (nx + 1) + si).ravel()
    lr, ul = ll + 1, ll + nx + 1
    ur = ul + 1
    # square k -> triangles 2k (lower-right) and 2k+1 (upper-left)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([ll, lr, ur])
    triangles[1::2] = np.column_stack([ll, ur, ul])

    btags = np.full(nodes.shape[0], INTERIOR, dtype=object)
    btags[ii == 0] = NEUMANN_LEFT
    btags[ii == nx] = NEUMANN_RIGHT
    btags[jj == 0] = GAMMA_P
    btags[jj == ny] = GAMMA_N

    # integer comparison keeps the y = 0 tie-break exact
    rtags = np.where(2 * jj >= ny, OMEGA_N, OMEGA_P).astype(object)
    # triangle centroids never lie on a grid line
    tri_sj = np.repeat(sj.ravel(), 2)
    upper_tri = np.tile([False, True], nx * ny)
    centroid_2y3 = 3 * 2 * tri_sj + np.where(upper_tri, 4, 2)  # 3 * (2 * j_centroid)
    tri_regions = np.where(centroid_2y3 > 3 * ny, OMEGA_N, OMEGA_P).astype(object)

    return Mesh(nx=nx, ny=ny, nodes=nodes, triangles=triangles,
                boundary_tags=btags, region_tags=rtags, triangle_regions=tri_regions)


def triangle_average(mesh, values):
    """Arithmetic mean of the three nodal values on every triangle."""
    return np.asarray(values)[mesh.triangles].mean(axis=1)


def _check_coefficient(mesh, coeff):
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape != (mesh.n_nodes,):
        raise DomainError(f"coefficient must have {mesh.n_nodes} nodal values, got {coeff.shape}")
    if not np.all(np.isfinite(coeff)) or np.any(coeff <= 0.0):
        raise CoefficientDomainError("diffusion coefficient must be finite and strictly positive")
    return coeff


def assemble_stiffness(mesh, tri_coeff=None):
    """Stiffness matrix of ``-div(c grad .)`` for per-triangle coefficients ``c``."""
    local = mesh.reference_stiffness
    if tri_coeff is not None:
        local = local * np.asarray(tri_coeff)[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)
    return K.tocsr()


def assemble_mass(mesh):
    """Consistent P1 mass matrix."""
    ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = mesh.areas[:, None, None] * ref
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    M = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)
    return M.tocsr()


def assemble_operators(mesh, coeff):
    """Assemble stiffness and mass matrices for a nodal coefficient field.

    The element coefficient is the mean of the three nodal values.

    Returns
    -------
    stiffness, mass : scipy.sparse.csr_matrix
    """
    coeff = _check_coefficient(mesh, coeff)
    return assemble_stiffness(mesh, triangle_average(mesh, coeff)), assemble_mass(mesh)


def _split_dirichlet(n, dirichlet):
    if isinstance(dirichlet, Mapping):
        idx = np.fromiter(dirichlet.keys(), dtype=np.int64, count=len(dirichlet))
        vals = np.fromiter(dirichlet.values(), dtype=float, count=len(dirichlet))
    else:
        idx, vals = dirichlet
        idx = np.asarray(idx, dtype=np.int64)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), idx.shape)
    if idx.size == 0:
        raise DomainError("at least one Dirichlet node is required")
    if idx.min() < 0 or idx.max() >= n:
        raise DomainError("Dirichlet node index out of range")
    return idx, vals


def solve_dirichlet_system(stiffness, rhs, dirichlet):
    """Solve ``K u = f`` with prescribed values on a set of nodes.

    Dirichlet rows are replaced by identity rows and the known columns are
    moved to the right-hand side, which leaves a symmetric positive definite
    system on the free nodes.  Rows not listed in ``dirichlet`` carry the
    natural (homogeneous Neumann) condition.

    Parameters
    ----------
    stiffness : sparse matrix, shape (n, n)
    rhs : array_like, shape (n,)
    dirichlet : mapping node -> value, or pair ``(indices, values)``

    Returns
    -------
    ndarray, shape (n,)
    """
    K = sp.csr_matrix(stiffness)
    n = K.shape[0]
    rhs = np.asarray(rhs, dtype=float)
    idx, vals = _split_dirichlet(n, dirichlet)

    u = np.zeros(n)
    u[idx] = vals
    free = np.ones(n, dtype=bool)
    free[idx] = False
    if not free.any():
        return u

    K_ff = K[free][:, free].tocsc()
    b = rhs[free] - K[free][:, ~free] @ u[~free]
    try:
        lu = spla.splu(K_ff, permc_spec="MMD_AT_PLUS_A",
                       options={"SymmetricMode": True}, diag_pivot_thresh=0.0)
    except RuntimeError as exc:
        raise SolverError(f"reduced system is singular: {exc}") from exc
    x = lu.solve(b)
    r = b - K_ff @ x
    # one step of iterative refinement
    x += lu.solve(r)
    r = b - K_ff @ x
    scale = max(np.linalg.norm(b), np.abs(K_ff).max() * np.linalg.norm(x), np.finfo(float).tiny)
    rel = np.linalg.norm(r) / scale
    if not np.isfinite(rel) or rel > SOLVER_RTOL:
        raise SolverError(f"linear solve did not reach tolerance (relative residual {rel:.3e})",
                          residual=rel)
    u[free] = x
    return u


class BandedDirichletSolver:
    """Repeated solves of ``-div(c grad u) = 0`` with fixed Dirichlet nodes.

    Precomputes where every element-matrix entry lands in the banded upper
    storage of the reduced (free-node) system so that a new coefficient costs
    two ``bincount`` calls and one banded Cholesky solve.  Used on the MCMC
    path where the coefficient changes on every proposal.
    """

    def __init__(self, mesh, dirichlet_nodes):
        self.mesh = mesh
        n = mesh.n_nodes
        self.dirichlet_nodes = np.asarray(dirichlet_nodes, dtype=np.int64)
        free = np.ones(n, dtype=bool)
        free[self.dirichlet_nodes] = False
        self.free = np.flatnonzero(free)
        reduced = np.full(n, -1, dtype=np.int64)
        reduced[self.free] = np.arange(self.free.size)

        tri = mesh.triangles
        p = np.repeat(tri, 3, axis=1).ravel()
        q = np.tile(tri, (1, 3)).ravel()
        entry = np.arange(p.size)
        rp, rq = reduced[p], reduced[q]

        both = (rp >= 0) & (rq >= 0) & (rp <= rq)
        self.bandwidth = int(np.max(rq[both] - rp[both])) if both.any() else 0
        nf = self.free.size
        self._band_shape = (self.bandwidth + 1, nf)
        self._band_entries = entry[both]
        self._band_flat = np.ravel_multi_index(
            (self.bandwidth + rp[both] - rq[both], rq[both]), self._band_shape)

        couple = (rp >= 0) & (rq < 0)
        self._couple_entries = entry[couple]
        self._couple_row = rp[couple]
        self._couple_col = q[couple]
        self._ref = mesh.reference_stiffness.ravel()
        self._tri_of_entry = np.repeat(np.arange(mesh.n_triangles), 9)

    def solve(self, tri_coeff, dirichlet_values):
        """Nodal solution for per-triangle coefficients and Dirichlet data."""
        w = self._ref * np.asarray(tri_coeff)[self._tri_of_entry]
        band = np.bincount(self._band_flat, weights=w[self._band_entries],
                           minlength=self._band_shape[0] * self._band_shape[1])
        band = band.reshape(self._band_shape)
        u = np.zeros(self.mesh.n_nodes)
        u[self.dirichlet_nodes] = dirichlet_values
        rhs = -np.bincount(self._couple_row,
                           weights=w[self._couple_entries] * u[self._couple_col],
                           minlength=self.free.size)
        try:
            u[self.free] = scipy.linalg.solveh_banded(band, rhs, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"banded Cholesky failed: {exc}") from exc
        return u


def load_vector(mesh, f_values):
    """Right-hand side ``int f phi_i`` for the P1 interpolant of ``f``."""
    return assemble_mass(mesh) @ np.asarray(f_values, dtype=float)


def h1_norm(mesh, u):
    """Discrete H^1 norm ``sqrt(u^T (K + M) u)``."""
    u = np.asarray(u, dtype=float)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    return float(np.sqrt(u @ (K @ u) + u @ (M @ u)))


def l2_error(mesh, u_h, exact):
    """L^2 distance between a P1 field and a callable ``exact(x, y)``."""
    u_h = np.asarray(u_h, dtype=float)
    p = mesh.nodes[mesh.triangles]                       # (T, 3, 2)
    qp = np.einsum("qa,tad->tqd", _QUAD_BARY, p)         # (T, Q, 2)
    uh_q = _QUAD_BARY @ u_h[mesh.triangles].T            # (Q, T)
    diff = uh_q.T - exact(qp[..., 0], qp[..., 1])
    return float(np.sqrt(np.sum(mesh.areas * (diff ** 2 @ _QUAD_W))))


def interpolate(mesh, values, points):
    """Evaluate a P1 field at arbitrary points inside the closed square."""
    values = np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise DomainError("points must have shape (n, 2)")
    if np.any(np.abs(pts) > 1.0 + 1e-12):
        raise DomainError("points must lie in [-1, 1]^2")
    s = (pts[:, 0] + 1.0) / mesh.hx
    t = (pts[:, 1] + 1.0) / mesh.hy
    i = np.clip(np.floor(s).astype(int), 0, mesh.nx - 1)
    j = np.clip(np.floor(t).astype(int), 0, mesh.ny - 1)
    a, b = s - i, t - j
    ll = j * (mesh.nx + 1) + i
    lr, ul = ll + 1, ll + mesh.nx + 1
    ur = ul + 1
    lower = a >= b
    # lower-right triangle (ll, lr, ur): ll + a (lr - ll) + b (ur - lr)
    v_low = values[ll] + a * (values[lr] - values[ll]) + b * (values[ur] - values[lr])
    # upper-left triangle (ll, ur, ul): ll + b (ul - ll) + a (ur - ul)
    v_up = values[ll] + b * (values[ul] - values[ll]) + a * (values[ur] - values[ul])
    return np.where(lower, v_low, v_up)


def write_mesh_csv(mesh, nodes_path, triangles_path):
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "x", "y", "tag", "region"])
        for k, (x, y) in enumerate(mesh.nodes):
            w.writerow([k, f"{x:.17g}", f"{y:.17g}", mesh.boundary_tags[k], mesh.region_tags[k]])
    with open(triangles_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tri_id", "n0", "n1", "n2"])
        for t, (a, b, c) in enumerate(mesh.triangles):
            w.writerow([t, a, b, c])


def read_mesh_csv(nodes_path, triangles_path):
    """Rebuild a mesh from its CSV export (the grid must be structured)."""
    with open(nodes_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xs = np.array([float(r["x"]) for r in rows])
    ys = np.array([float(r["y"]) for r in rows])
    nx = np.unique(xs).size - 1
    ny = np.unique(ys).size - 1
    mesh = build_mesh(nx, ny)
    with open(triangles_path, newline="") as fh:
        tris = np.array([[int(r["n0"]), int(r["n1"]), int(r["n2"])] for r in csv.DictReader(fh)])
    if (not np.allclose(mesh.nodes, np.column_stack([xs, ys]), atol=1e-14)
            or tris.shape != mesh.triangles.shape or not np.array_equal(tris, mesh.triangles)):
        raise DomainError(f"{nodes_path} does not describe a structured mesh")
    return mesh
