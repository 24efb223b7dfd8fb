"""Bayesian reconstruction of doping profiles in a semiconductor diode.

The unknown is the equilibrium potential ``V_e``; a Matern Gaussian prior,
current-density data on the top contact and a preconditioned Crank-Nicolson
sampler give a posterior whose mean is mapped back to the doping by the
explicit inversion of the Poisson equation.
"""
import logging

from .exceptions import (CoefficientDomainError, ConfigError, DivergenceError, DomainError,
                         DopinvError, MeshMismatchError, SolverError, StageError)
from .mesh_fem import Mesh, build_mesh
from .forward import (DeviceParams, ForwardOperator, Observation, doping_profile, forward_map,
                      solve_continuity, solve_equilibrium_poisson)
from .prior import MaternParams, MaternPrior, build_prior, build_prior_mean
from .mcmc import NoiseModel, SamplerConfig, chain_summary, run_chain, synthesize_observations
from .reconstruct import doping_from_potential, fd_laplacian, field_mse
from .config import ExperimentConfig
from .experiment import ExperimentReport, run_full_experiment, run_stage, run_sweep

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "CoefficientDomainError", "ConfigError", "DeviceParams", "DivergenceError", "DomainError",
    "DopinvError", "ExperimentConfig", "ExperimentReport", "ForwardOperator", "MaternParams",
    "MaternPrior", "Mesh", "MeshMismatchError", "NoiseModel", "Observation", "SamplerConfig",
    "SolverError", "StageError", "build_mesh", "build_prior", "build_prior_mean", "chain_summary",
    "doping_from_potential", "doping_profile", "fd_laplacian", "field_mse", "forward_map",
    "run_chain", "run_full_experiment", "run_stage", "run_sweep", "solve_continuity",
    "solve_equilibrium_poisson", "synthesize_observations",
]
