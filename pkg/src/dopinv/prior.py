"""Matern-Whittle Gaussian random-field prior on the equilibrium potential.

The covariance is evaluated at mesh nodes, diagonalized densely, and
truncated to ``n_kl`` Karhunen-Loeve modes.  Samples are

    V = m0 + sum_i sqrt(lambda_i) xi_i phi_i,   xi_i ~ N(0, 1).

Note that ``ell`` is the correlation length; the same symbol as the Debye
length appears in some write-ups of this model, hence the distinct name.
"""
from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bessel import modified_bessel_k
from .exceptions import DomainError
from .forward import solve_equilibrium_poisson

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaternParams:
    sigma2: float = 0.01
    nu: float = 1.0
    ell: float = 0.7

    def __post_init__(self):
        for name in ("sigma2", "nu", "ell"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"Matern {name} must be positive, got {v}")


def matern_from_distance(d, p):
    """Matern-Whittle covariance as a function of Euclidean distance (vectorized)."""
    d = np.asarray(d, dtype=float)
    out = np.full(d.shape, float(p.sigma2))
    pos = d > 0.0
    if pos.any():
        z = d[pos] / p.ell
        coef = p.sigma2 * 2.0 ** (1.0 - p.nu) / math.gamma(p.nu)
        out[pos] = coef * z ** p.nu * modified_bessel_k(p.nu, z)
    return out


def matern_kernel(x, y, p):
    """Covariance between two points; returns ``sigma2`` at zero distance."""
    d = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    return float(matern_from_distance(np.array([d]), p)[0])


def build_covariance(mesh_or_points, p):
    """Dense kernel matrix over mesh nodes (or an ``(n, 2)`` point array)."""
    pts = getattr(mesh_or_points, "nodes", mesh_or_points)
    pts = np.asarray(pts, dtype=float)
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(pts.shape[0], k=1)
    cov = np.full(d.shape, float(p.sigma2))
    upper = matern_from_distance(d[iu], p)
    cov[iu] = upper
    cov[iu[1], iu[0]] = upper
    return cov


def kl_decompose(cov, n_kl):
    """Leading ``n_kl`` eigenpairs of a symmetric covariance matrix.

    Eigenvalues are returned in descending order with roundoff negatives
    clipped to zero.  Each eigenvector is signed so that its entry of largest
    magnitude is positive, which makes the basis independent of LAPACK sign
    choices.

    Returns
    -------
    eigenvalues : ndarray, shape (n_kl,)
    eigenvectors : ndarray, shape (n, n_kl)
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.ndim != 2 or cov.shape != (n, n):
        raise DomainError("covariance must be a square matrix")
    if int(n_kl) != n_kl or not 1 <= n_kl <= n:
        raise DomainError(f"n_kl must be in [1, {n}], got {n_kl}")
    n_kl = int(n_kl)
    try:
        vals, vecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    vals = vals[::-1][:n_kl]
    vecs = vecs[:, ::-1][:, :n_kl]
    scale = max(float(np.max(np.abs(np.diag(cov)))), np.finfo(float).tiny)
    if vals[-1] < -1e-8 * scale:
        warnings.warn(f"covariance has a negative eigenvalue {vals[-1]:.3e}; clipped to 0",
                      RuntimeWarning, stacklevel=2)
    vals = np.clip(vals, 0.0, None)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(n_kl)])
    signs[signs == 0] = 1.0
    return vals, np.ascontiguousarray(vecs * signs)


@dataclass(frozen=True, eq=False)
class MaternPrior:
    """Truncated KL representation of ``N(m0, Sigma0)`` on mesh nodes."""

    mean: np.ndarray = field(repr=False)
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        n, k = self.eigenvectors.shape
        if self.mean.shape != (n,) or self.eigenvalues.shape != (k,):
            raise DomainError("prior mean, eigenvalues and eigenvectors have inconsistent shapes")
        object.__setattr__(self, "_modes",
                           np.ascontiguousarray(self.eigenvectors * np.sqrt(self.eigenvalues)))

    @property
    def n_kl(self):
        return self.eigenvalues.size

    @property
    def n_nodes(self):
        return self.mean.size

    @property
    def scaled_modes(self):
        """Columns ``sqrt(lambda_i) phi_i``."""
        return self._modes

    def fluctuation(self, xi):
        """Zero-mean field ``sum_i sqrt(lambda_i) xi_i phi_i``."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] != self.n_kl:
            raise DomainError(f"expected {self.n_kl} KL coefficients, got {xi.shape[0]}")
        return self._modes @ xi

    def pointwise_variance(self):
        """Nodal variance of the truncated field, ``sum_i lambda_i phi_i^2``."""
        return (self._modes ** 2).sum(axis=1)

    def with_mean(self, mean):
        return MaternPrior(np.asarray(mean, dtype=float), self.eigenvalues, self.eigenvectors)


def sample_field(prior, xi):
    """Evaluate the truncated KL expansion for coefficients ``xi``."""
    return prior.mean + prior.fluctuation(xi)


def kl_cache_key(mesh, p, n_kl):
    text = f"{mesh.mesh_hash}|{p.sigma2!r}|{p.nu!r}|{p.ell!r}|{int(n_kl)}"
    return hashlib.sha256(text.encode()).hexdigest()[:20]


def kl_eigenpairs(mesh, p, n_kl, cache_dir=None):
    """Eigenpairs for ``(mesh, p, n_kl)``, cached as ``.npz`` when ``cache_dir`` is set."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"kl_{kl_cache_key(mesh, p, n_kl)}.npz"
        if path.exists():
            with np.load(path) as data:
                if data["mesh_hash"].item() == mesh.mesh_hash:
                    logger.debug("loaded KL eigenpairs from %s", path)
                    return data["eigenvalues"], data["eigenvectors"]
    vals, vecs = kl_decompose(build_covariance(mesh, p), n_kl)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + ".tmp.npz")
        np.savez(tmp, eigenvalues=vals, eigenvectors=vecs,
                 mesh_hash=np.array(mesh.mesh_hash), sigma2=p.sigma2, nu=p.nu, ell=p.ell,
                 n_kl=n_kl)
        tmp.replace(path)
    return vals, vecs


def build_prior(mesh, p, n_kl, mean, cache_dir=None):
    vals, vecs = kl_eigenpairs(mesh, p, n_kl, cache_dir)
    return MaternPrior(np.asarray(mean, dtype=float), vals, vecs)


def build_prior_mean(mesh, C_true, params, p, perturb_scale=1.0, seed=0, *,
                     mode="perturbation", guess_doping=0.0, cache_dir=None):
    """Prior mean for the inversion.

    ``mode="perturbation"`` returns ``V_true + perturb_scale * s`` where
    ``V_true`` solves the equilibrium Poisson equation for ``C_true`` and ``s``
    is one seeded draw from the full (untruncated) ``N(0, Sigma0)``, so the
    mean does not change with the KL truncation used by the sampler.

    ``mode="poisson_guess"`` ignores ``C_true`` and solves the Poisson
    equation for the constant doping ``guess_doping``.
    """
    if mode == "poisson_guess":
        return solve_equilibrium_poisson(mesh, np.full(mesh.n_nodes, float(guess_doping)), params)
    if mode != "perturbation":
        raise DomainError(f"unknown prior mean mode {mode!r}")
    V_true = solve_equilibrium_poisson(mesh, C_true, params)
    if perturb_scale == 0:
        return V_true
    vals, vecs = kl_eigenpairs(mesh, p, mesh.n_nodes, cache_dir)
    xi = np.random.default_rng(seed).standard_normal(mesh.n_nodes)
    return V_true + perturb_scale * (vecs @ (np.sqrt(vals) * xi))
