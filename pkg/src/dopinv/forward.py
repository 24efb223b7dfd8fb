"""Linearized unipolar drift-diffusion forward problem.

Two decoupled elliptic solves make up the model: the semilinear equilibrium
Poisson equation

    lam^2 Lap(V_e) = delta^2 exp(V_e) - C,   V_e = V_bi on the contacts,

and the continuity equation for the linearized Slotboom variable

    div(exp(V_e) grad u) = 0,   u = U on GammaP,  u = 0 on GammaN.

The observable is the normal electron current density on GammaN,
``mu_n delta^2 exp(V_e) du/dy`` at the top-contact nodes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import DivergenceError, DomainError, SolverError
from .mesh_fem import (BandedDirichletSolver, assemble_mass, assemble_operators,
                       assemble_stiffness, h1_norm, solve_dirichlet_system, triangle_average)

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
OVERFLOW_GUARD = 50.0


@dataclass(frozen=True)
class DeviceParams:
    """Scaled device constants.

    ``lam`` is the scaled Debye length and ``delta`` the scaled intrinsic
    number; ``U`` is the voltage applied on GammaP.
    """

    lam: float = 1.0
    delta: float = 1.0
    mu_n: float = 1.0
    V_bi: float = 0.6
    U: float = 2.0

    def __post_init__(self):
        for name in ("lam", "delta", "mu_n"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be positive, got {v}")
        for name in ("V_bi", "U"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")


@dataclass
class Observation:
    """Noisy current-density data at GammaN nodes.

    ``y_clean`` keeps the noiseless forward output when the data are
    synthetic; it is never used by the sampler.
    """

    y: np.ndarray
    points: np.ndarray
    sigma_n2: float
    y_clean: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.points = np.asarray(self.points, dtype=np.int64)
        if self.y.ndim != 1 or self.y.shape != self.points.shape:
            raise DomainError("observation values and points must be 1-D of equal length")
        if not self.sigma_n2 > 0:
            raise DomainError("noise variance must be positive")
        if not np.all(np.isfinite(self.y)):
            raise DomainError("observation values must be finite")

    @property
    def m(self):
        return self.y.size


def doping_profile(mesh, C_N=1.0, C_P=2.0):
    """Piecewise constant diode doping: ``C_N`` in OmegaN and ``-C_P`` in OmegaP."""
    return np.where(mesh.region_tags == "OmegaN", float(C_N), -float(C_P))


def solve_equilibrium_poisson(mesh, C, params, *, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER,
                              return_info=False):
    """Newton solve of the equilibrium Poisson equation.

    Reaction and source terms are paired with the P1 interpolant through the
    consistent mass matrix, so the discrete equation at a node averages the
    doping over the neighbouring elements.  Starts from ``V = V_bi``; a step
    whose residual grows is halved until it decreases.

    Parameters
    ----------
    mesh : Mesh
    C : array_like, shape (n_nodes,)
        Nodal doping.
    params : DeviceParams
    tol : float
        Bound on the infinity norm of the nonlinear residual at free nodes.

    Returns
    -------
    V : ndarray
        Equilibrium potential.  With ``return_info`` a dict holding
        ``iterations`` and ``residual`` is returned as well.
    """
    C = np.asarray(C, dtype=float)
    if C.shape != (mesh.n_nodes,) or not np.all(np.isfinite(C)):
        raise DomainError("doping must be a finite nodal field")
    lam2, d2 = params.lam ** 2, params.delta ** 2
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    MC = M @ C
    contacts = mesh.contact_nodes
    free = np.ones(mesh.n_nodes, dtype=bool)
    free[contacts] = False

    def residual(V):
        F = lam2 * (K @ V) + d2 * (M @ np.exp(V)) - MC
        F[~free] = 0.0
        return F

    V = np.full(mesh.n_nodes, float(params.V_bi))
    F = residual(V)
    res = np.abs(F).max()
    zero_bc = (contacts, 0.0)
    it = 0
    while res > tol:
        if it >= max_iter:
            raise DivergenceError(f"Newton did not converge in {max_iter} iterations "
                                  f"(residual {res:.3e})", residual=res)
        J = lam2 * K + d2 * (M @ sp.diags(np.exp(V)))
        dV = solve_dirichlet_system(J, -F, zero_bc)
        t = 1.0
        while True:
            V_new = V + t * dV
            if np.abs(V_new).max() > OVERFLOW_GUARD:
                if t < 1e-8:
                    raise DivergenceError("Newton iterate exceeded the overflow guard", residual=res)
                t *= 0.5
                continue
            F_new = residual(V_new)
            res_new = np.abs(F_new).max()
            if res_new < res or t < 1e-8:
                break
            t *= 0.5
        V, F, res = V_new, F_new, res_new
        it += 1
        logger.debug("Newton iteration %d: residual %.3e (step %.3g)", it, res, t)
    if return_info:
        return V, {"iterations": it, "residual": float(res)}
    return V


def continuity_dirichlet(mesh, params):
    """Dirichlet data for the continuity solve: U on GammaP, 0 on GammaN."""
    nodes = mesh.contact_nodes
    vals = np.concatenate([np.full(mesh.gamma_p.size, float(params.U)),
                           np.zeros(mesh.gamma_n.size)])
    return nodes, vals


def solve_continuity(mesh, V_e, params):
    """Slotboom variable for a given equilibrium potential (general sparse path)."""
    V_e = np.asarray(V_e, dtype=float)
    if V_e.shape != (mesh.n_nodes,) or not np.all(np.isfinite(V_e)):
        raise DomainError("potential must be a finite nodal field")
    K, _ = assemble_operators(mesh, np.exp(V_e))
    return solve_dirichlet_system(K, np.zeros(mesh.n_nodes), continuity_dirichlet(mesh, params))


def normal_gradient_operator(mesh, points):
    """Sparse map from nodal values to recovered du/dy at top-contact nodes.

    The nodal gradient is the area-weighted mean of the constant element
    gradients over the triangles touching the node.
    """
    points = np.asarray(points, dtype=np.int64)
    on_top = np.isin(points, mesh.gamma_n)
    if points.ndim != 1 or not on_top.all():
        raise DomainError(f"measurement points must be GammaN nodes, got {points[~on_top].tolist()}")
    gy = mesh.basis_gradients[:, :, 1]
    rows, cols, vals = [], [], []
    for r, p in enumerate(points):
        ts = np.flatnonzero((mesh.triangles == p).any(axis=1))
        w = mesh.areas[ts] / mesh.areas[ts].sum()
        for t, wt in zip(ts, w):
            rows.extend([r] * 3)
            cols.extend(mesh.triangles[t])
            vals.extend(wt * gy[t])
    R = sp.coo_matrix((vals, (rows, cols)), shape=(points.size, mesh.n_nodes))
    return R.tocsr()


def observe_current_density(mesh, V_e, u_hat, params, points=None, *, weight="nodal"):
    """Normal current density ``mu_n delta^2 w du/dy`` at top-contact nodes.

    ``weight="nodal"`` uses ``w = exp(V_e)`` at the measurement node, which is
    ``exp(V_bi)`` for any potential that satisfies the contact condition;
    ``weight="builtin"`` always uses ``exp(V_bi)``.
    """
    if points is None:
        points = mesh.gamma_n
    R = normal_gradient_operator(mesh, points)
    dudy = R @ np.asarray(u_hat, dtype=float)
    return params.mu_n * params.delta ** 2 * _flux_weight(V_e, points, params, weight) * dudy


def _flux_weight(V_e, points, params, weight):
    if weight == "nodal":
        return np.exp(np.asarray(V_e, dtype=float)[points])
    if weight == "builtin":
        return np.exp(params.V_bi)
    raise DomainError(f"unknown flux weight {weight!r}")


def forward_map(mesh, field_values, params, points=None, *, kind="potential", weight="nodal"):
    """Parameter-to-observable map.

    ``kind="potential"`` treats the input as ``V_e`` (the MCMC path);
    ``kind="doping"`` first solves the equilibrium Poisson equation.
    """
    if kind == "doping":
        V_e = solve_equilibrium_poisson(mesh, field_values, params)
    elif kind == "potential":
        V_e = np.asarray(field_values, dtype=float)
    else:
        raise DomainError(f"kind must be 'potential' or 'doping', got {kind!r}")
    u_hat = solve_continuity(mesh, V_e, params)
    return observe_current_density(mesh, V_e, u_hat, params, points, weight=weight)


class ForwardOperator:
    """Fast repeated evaluation of the potential-to-observation map.

    Same discretization as :func:`forward_map` with ``kind="potential"``, but
    assembly indices, the Dirichlet reduction and the gradient-recovery
    operator are built once.  Instances hold no mutable state after
    construction.
    """

    def __init__(self, mesh, params, points=None, *, weight="nodal"):
        self.mesh = mesh
        self.params = params
        self.points = mesh.gamma_n.copy() if points is None else np.asarray(points, dtype=np.int64)
        self.weight = weight
        self._R = normal_gradient_operator(mesh, self.points)
        self._solver = BandedDirichletSolver(mesh, mesh.contact_nodes)
        nodes, vals = continuity_dirichlet(mesh, params)
        order = np.argsort(nodes)
        lookup = dict(zip(nodes[order], vals[order]))
        self._dirichlet_values = np.array([lookup[k] for k in self._solver.dirichlet_nodes])
        self._scale = params.mu_n * params.delta ** 2
        _flux_weight(np.zeros(mesh.n_nodes), self.points, params, weight)

    @property
    def n_obs(self):
        return self.points.size

    def state(self, V_e):
        """Slotboom variable for ``V_e``."""
        V_e = np.asarray(V_e, dtype=float)
        gamma = np.exp(V_e)
        if not np.all(np.isfinite(gamma)):
            raise SolverError("exp(V_e) overflowed")
        return self._solver.solve(triangle_average(self.mesh, gamma), self._dirichlet_values)

    def __call__(self, V_e):
        V_e = np.asarray(V_e, dtype=float)
        u_hat = self.state(V_e)
        w = _flux_weight(V_e, self.points, self.params, self.weight)
        return self._scale * w * (self._R @ u_hat)


def energy_ratio(mesh, V_e, params):
    """``||u||_H1 / exp(2 ||V_e||_inf)`` for the continuity solution of ``V_e``."""
    V_e = np.asarray(V_e, dtype=float)
    return h1_norm(mesh, solve_continuity(mesh, V_e, params)) / np.exp(2.0 * np.abs(V_e).max())


def lipschitz_ratio(mesh, V1, V2, params):
    """``||u1 - u2||_H1 / (exp(4 max ||V||_inf) ||V1 - V2||_inf)``."""
    V1 = np.asarray(V1, dtype=float)
    V2 = np.asarray(V2, dtype=float)
    dist = np.abs(V1 - V2).max()
    if dist == 0:
        raise DomainError("Lipschitz ratio needs two distinct potentials")
    du = solve_continuity(mesh, V1, params) - solve_continuity(mesh, V2, params)
    bound = np.exp(4.0 * max(np.abs(V1).max(), np.abs(V2).max())) * dist
    return h1_norm(mesh, du) / bound


def stability_constant(mesh, params, headroom=0.1):
    """Constant of the energy estimate, calibrated at ``V_e = 0`` with ``headroom``."""
    return (1.0 + headroom) * energy_ratio(mesh, np.zeros(mesh.n_nodes), params)
