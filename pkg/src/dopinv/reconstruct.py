"""Doping recovery from an equilibrium potential and error metrics.

With ``gamma = exp(V_e)`` the Poisson equation inverts explicitly to
``C = delta^2 gamma - lam^2 Lap(ln gamma)``; ``ln gamma`` is ``V_e`` itself,
so the Laplacian is applied to the potential directly.
"""
from __future__ import annotations

import numpy as np

from .exceptions import DomainError, MeshMismatchError


def to_grid(mesh, values):
    """Nodal vector -> ``(ny + 1, nx + 1)`` array indexed ``[j, i]``."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise MeshMismatchError(f"field has {values.shape} values, mesh has {mesh.n_nodes} nodes")
    return values.reshape(mesh.ny + 1, mesh.nx + 1)


def from_grid(grid):
    return np.asarray(grid, dtype=float).ravel()


# one-sided second-derivative weights, f_0 first (f_0 on the boundary)
ONE_SIDED_WEIGHTS = {
    3: np.array([1.0, -2.0, 1.0]),
    4: np.array([2.0, -5.0, 4.0, -1.0]),
    5: np.array([35.0, -104.0, 114.0, -56.0, 11.0]) / 12.0,
}


def _second_difference(f, h, axis, n_points):
    f = np.moveaxis(f, axis, 0)
    w = ONE_SIDED_WEIGHTS[min(n_points, f.shape[0])]
    k = w.size
    d2 = np.empty_like(f)
    d2[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    d2[0] = np.tensordot(w, f[:k], axes=1)
    d2[-1] = np.tensordot(w, f[::-1][:k], axes=1)
    return np.moveaxis(d2 / (h * h), 0, axis)


def fd_laplacian(grid, hx, hy=None, *, boundary_points=5):
    """Five-point Laplacian of a grid field, one-sided at the boundary.

    Boundary nodes use a one-sided second difference in the direction normal
    to the edge and the centered stencil along it.  ``boundary_points=5``
    selects the third-order stencil ``(35, -104, 114, -56, 11) / 12h^2``,
    ``4`` the second-order ``(2, -5, 4, -1) / h^2``.  Directions with fewer
    grid points fall back to the longest stencil that fits.

    Parameters
    ----------
    grid : array_like, shape (ny + 1, nx + 1)
    hx, hy : float
        Grid spacings; ``hy`` defaults to ``hx``.
    """
    f = np.asarray(grid, dtype=float)
    if f.ndim != 2 or min(f.shape) < 3:
        raise DomainError("fd_laplacian needs at least 3 x 3 grid points")
    if boundary_points not in (4, 5):
        raise DomainError("boundary_points must be 4 or 5")
    hy = hx if hy is None else hy
    return (_second_difference(f, hy, 0, boundary_points)
            + _second_difference(f, hx, 1, boundary_points))


def doping_from_potential(mesh, V_e, params, *, boundary_points=5):
    """Reconstructed doping ``delta^2 exp(V_e) - lam^2 Lap(V_e)`` at every node."""
    V = np.asarray(V_e, dtype=float)
    lap = from_grid(fd_laplacian(to_grid(mesh, V), mesh.hx, mesh.hy,
                                 boundary_points=boundary_points))
    return params.delta ** 2 * np.exp(V) - params.lam ** 2 * lap


def field_mse(a, b):
    """Mean over all nodes of the squared difference."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MeshMismatchError(f"fields live on different meshes ({a.shape} vs {b.shape})")
    return float(np.mean((a - b) ** 2))


def junction_band(mesh, rows=3):
    """Boolean mask of the ``rows`` grid rows centered on the junction y = 0."""
    j = np.arange(mesh.n_nodes) // (mesh.nx + 1)
    centre = mesh.ny / 2.0
    half = rows / 2.0
    return np.abs(j - centre) < half
