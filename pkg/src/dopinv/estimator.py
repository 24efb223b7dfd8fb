"""scikit-learn style wrappers around the forward map and the inversion.

:class:`CurrentDensityMap` is a stateless transformer from nodal potentials to
current densities.  :class:`DopingInversion` fits a posterior to one
observation vector and predicts the reconstructed doping at arbitrary points
of the device.  Both follow the estimator conventions (constructor stores
parameters only, ``get_params``/``set_params``, fitted attributes end in
``_``), so they can be cloned and grid-searched over prior or sampler
settings.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .forward import DeviceParams, ForwardOperator, Observation, solve_equilibrium_poisson
from .mcmc import SamplerConfig, run_chain
from .mesh_fem import build_mesh, interpolate
from .prior import MaternParams, build_prior
from .reconstruct import doping_from_potential


class CurrentDensityMap(TransformerMixin, BaseEstimator):
    """Potential-to-observation map ``G`` as a transformer.

    ``transform`` takes rows of nodal potentials, shape ``(n_samples,
    n_nodes)``, and returns the current densities at the top-contact nodes,
    shape ``(n_samples, nx + 1)``.
    """

    def __init__(self, nx=20, ny=20, lam=1.0, delta=1.0, mu_n=1.0, V_bi=0.6, U=2.0,
                 flux_weight="nodal"):
        self.nx = nx
        self.ny = ny
        self.lam = lam
        self.delta = delta
        self.mu_n = mu_n
        self.V_bi = V_bi
        self.U = U
        self.flux_weight = flux_weight

    def _params(self):
        return DeviceParams(lam=self.lam, delta=self.delta, mu_n=self.mu_n, V_bi=self.V_bi, U=self.U)

    def fit(self, X=None, y=None):
        self.mesh_ = build_mesh(self.nx, self.ny)
        self.operator_ = ForwardOperator(self.mesh_, self._params(), weight=self.flux_weight)
        self.n_features_in_ = self.mesh_.n_nodes
        return self

    def transform(self, X):
        check_is_fitted(self, "operator_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the mesh has {self.n_features_in_} nodes")
        return np.vstack([self.operator_(row) for row in X])


class DopingInversion(BaseEstimator):
    """Bayesian doping reconstruction from one current-density measurement.

    Parameters
    ----------
    nx, ny : int
        Mesh resolution.
    lam, delta, mu_n, V_bi, U : float
        Device constants.
    sigma2, nu, ell : float
        Matern prior variance, smoothness and correlation length.
    n_kl : int or None
        Number of KL modes (None keeps all).
    prior_mean : array_like or None
        Prior mean potential; None solves the Poisson equation for the
        constant doping ``guess_doping``.
    guess_doping : float
    sigma_n2 : float
        Noise variance of the observations.
    kind, beta, n_total, n_burn, thin :
        Sampler settings.
    random_state : int
        Seed of the chain.

    Attributes
    ----------
    posterior_mean_ : ndarray
        Posterior mean of the equilibrium potential.
    posterior_variance_ : ndarray
    doping_ : ndarray
        Reconstructed nodal doping.
    acceptance_rate_ : float
    chain_ : Chain
    """

    def __init__(self, nx=20, ny=20, lam=1.0, delta=1.0, mu_n=1.0, V_bi=0.6, U=2.0,
                 sigma2=0.01, nu=1.0, ell=0.7, n_kl=None, prior_mean=None, guess_doping=0.0,
                 sigma_n2=0.01, kind="pcn", beta=0.2, n_total=10_000, n_burn=None, thin=10,
                 flux_weight="nodal", random_state=0):
        self.nx = nx
        self.ny = ny
        self.lam = lam
        self.delta = delta
        self.mu_n = mu_n
        self.V_bi = V_bi
        self.U = U
        self.sigma2 = sigma2
        self.nu = nu
        self.ell = ell
        self.n_kl = n_kl
        self.prior_mean = prior_mean
        self.guess_doping = guess_doping
        self.sigma_n2 = sigma_n2
        self.kind = kind
        self.beta = beta
        self.n_total = n_total
        self.n_burn = n_burn
        self.thin = thin
        self.flux_weight = flux_weight
        self.random_state = random_state

    def fit(self, X, y=None):
        """Sample the posterior given observations ``X`` at the top-contact nodes.

        ``X`` is the observation vector, shape ``(nx + 1,)`` or ``(1, nx + 1)``;
        ``y`` is ignored.
        """
        obs = check_array(X, ensure_2d=False).ravel()
        mesh = build_mesh(self.nx, self.ny)
        if obs.size != mesh.gamma_n.size:
            raise ValueError(f"expected {mesh.gamma_n.size} observations, got {obs.size}")
        params = DeviceParams(lam=self.lam, delta=self.delta, mu_n=self.mu_n, V_bi=self.V_bi,
                              U=self.U)
        if self.prior_mean is None:
            m0 = solve_equilibrium_poisson(mesh, np.full(mesh.n_nodes, float(self.guess_doping)),
                                           params)
        else:
            m0 = check_array(self.prior_mean, ensure_2d=False).ravel()
            if m0.size != mesh.n_nodes:
                raise ValueError(f"prior_mean has {m0.size} values, the mesh has {mesh.n_nodes} nodes")
        n_kl = mesh.n_nodes if self.n_kl is None else self.n_kl
        prior = build_prior(mesh, MaternParams(self.sigma2, self.nu, self.ell), n_kl, m0)
        forward = ForwardOperator(mesh, params, weight=self.flux_weight)
        data = Observation(y=obs, points=forward.points, sigma_n2=self.sigma_n2)
        config = SamplerConfig(kind=self.kind, beta=self.beta, n_total=self.n_total,
                               n_burn=self.n_burn, thin=self.thin, trace_nodes=())
        chain = run_chain(config, data, prior, forward, self.random_state)

        self.mesh_ = mesh
        self.chain_ = chain
        self.posterior_mean_ = chain.posterior_mean
        self.posterior_variance_ = chain.posterior_variance
        self.acceptance_rate_ = chain.acceptance_rate
        self.doping_ = doping_from_potential(mesh, chain.posterior_mean, params)
        self.n_features_in_ = obs.size
        return self

    def predict(self, X):
        """Reconstructed doping at points ``X`` of shape ``(n_points, 2)`` (P1 interpolation)."""
        check_is_fitted(self, "doping_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("X must hold (x, y) coordinates")
        return interpolate(self.mesh_, self.doping_, X)

    def predict_potential(self, X):
        check_is_fitted(self, "posterior_mean_")
        return interpolate(self.mesh_, self.posterior_mean_, check_array(X))
