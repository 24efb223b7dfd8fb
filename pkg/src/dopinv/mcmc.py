"""Gaussian likelihood, pCN and random-walk Metropolis samplers, chain storage.

Both samplers move in whitened KL coordinates ``xi`` (``V = m0 + Phi
sqrt(Lambda) xi``), so proposals and the prior density are exact even when
trailing eigenvalues are tiny.  The field-level helpers ``pcn_propose`` and
``rw_propose`` express the same moves on nodal fields.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, SolverError
from .forward import Observation, forward_map
from .mesh_fem import build_mesh

logger = logging.getLogger(__name__)

SAMPLERS = ("pcn", "rw")
HISTOGRAM_BINS = 64


@dataclass(frozen=True)
class NoiseModel:
    sigma_n2: float = 0.01

    def __post_init__(self):
        if not self.sigma_n2 > 0:
            raise DomainError("noise variance must be positive")


def neg_log_likelihood(y, g):
    """``||y - g||^2 / (2 sigma_n^2)`` for diagonal noise covariance."""
    g = np.asarray(g, dtype=float)
    if g.shape != y.y.shape:
        raise DomainError(f"forward output has shape {g.shape}, data has {y.y.shape}")
    r = y.y - g
    return float(r @ r) / (2.0 * y.sigma_n2)


def synthesize_observations(mesh, C_true, params, points=None, noise=NoiseModel(), seed=0,
                            *, refine=1, weight="nodal"):
    """Noisy synthetic current densities for a true doping profile.

    Parameters
    ----------
    C_true : array_like or callable
        Nodal doping on ``mesh``, or a callable ``mesh -> nodal doping``.  A
        callable is required when ``refine > 1``: the clean data then come
        from a mesh refined by that factor in each direction, observed at the
        same physical points.
    """
    points = mesh.gamma_n if points is None else np.asarray(points, dtype=np.int64)
    refine = int(refine)
    if refine < 1:
        raise DomainError("refine must be a positive integer")
    if refine == 1:
        C = C_true(mesh) if callable(C_true) else C_true
        clean = forward_map(mesh, C, params, points, kind="doping", weight=weight)
    else:
        if not callable(C_true):
            raise DomainError("refined data generation needs the doping as a callable of the mesh")
        fine = build_mesh(mesh.nx * refine, mesh.ny * refine)
        fine_points = fine.grid_index((points % (mesh.nx + 1)) * refine, fine.ny)
        clean = forward_map(fine, C_true(fine), params, fine_points, kind="doping", weight=weight)
    rng = np.random.default_rng(seed)
    y = clean + math.sqrt(noise.sigma_n2) * rng.standard_normal(clean.size)
    return Observation(y=y, points=points, sigma_n2=noise.sigma_n2, y_clean=clean)


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")


def pcn_propose(current, prior, beta, xi):
    """pCN move ``m0 + sqrt(1 - beta^2) (V - m0) + beta * prior fluctuation(xi)``."""
    _check_beta(beta)
    current = np.asarray(current, dtype=float)
    return prior.mean + math.sqrt(1.0 - beta * beta) * (current - prior.mean) \
        + beta * prior.fluctuation(xi)


def pcn_accept(phi_current, phi_proposed, u):
    """Accept iff ``log u <= phi_current - phi_proposed``."""
    with np.errstate(divide="ignore"):
        return bool(np.log(u) <= phi_current - phi_proposed)


def rw_propose(current, prior, beta, xi):
    """Random-walk move ``V + beta * prior fluctuation(xi)``."""
    if beta < 0:
        raise DomainError("beta must be nonnegative")
    return np.asarray(current, dtype=float) + beta * prior.fluctuation(xi)


def prior_log_density(prior, V, *, tol=0.0):
    """Unnormalized Gaussian prior log density from the KL projection of ``V - m0``.

    Modes with eigenvalue ``<= tol`` carry no prior mass and are left out.
    """
    c = prior.eigenvectors.T @ (np.asarray(V, dtype=float) - prior.mean)
    keep = prior.eigenvalues > tol
    return float(-0.5 * np.sum(c[keep] ** 2 / prior.eigenvalues[keep]))


def rw_accept(phi_current, phi_proposed, logprior_current, logprior_proposed, u):
    """Metropolis test for a symmetric proposal with prior and likelihood."""
    with np.errstate(divide="ignore"):
        log_alpha = (phi_current - phi_proposed) + (logprior_proposed - logprior_current)
        return bool(np.log(u) <= log_alpha)


@dataclass
class SamplerConfig:
    """Sampler settings.  ``n_burn=None`` means 20% of ``n_total``."""

    kind: str = "pcn"
    beta: float = 0.2
    n_total: int = 100_000
    n_burn: int | None = None
    thin: int = 10
    trace_nodes: tuple = (0, 199, 399)
    store_full_chain: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise DomainError(f"sampler kind must be one of {SAMPLERS}, got {self.kind!r}")
        if self.kind == "pcn":
            _check_beta(self.beta)
        elif self.beta < 0:
            raise DomainError("beta must be nonnegative")
        if self.n_total < 1 or self.thin < 1:
            raise DomainError("n_total and thin must be positive")
        if self.n_burn is None:
            self.n_burn = self.n_total // 5
        if not 0 <= self.n_burn <= self.n_total:
            raise DomainError("n_burn must lie in [0, n_total]")
        self.trace_nodes = tuple(int(k) for k in self.trace_nodes)


@dataclass
class Chain:
    """Sampler output.

    ``traces[k]`` is the value at ``trace_nodes[k]`` for iterations
    0..n_total (iteration 0 is the initial prior draw).  ``states`` holds
    every ``thin``-th post-burn-in state; the running moments use every
    post-burn-in state.
    """

    beta: float
    n_total: int
    n_burn: int
    thin: int
    kind: str
    accept_log: np.ndarray = field(repr=False)
    running_mean: np.ndarray = field(repr=False)
    running_m2: np.ndarray = field(repr=False)
    n_post: int = 0
    states: np.ndarray = field(default=None, repr=False)
    trace_nodes: tuple = ()
    traces: np.ndarray = field(default=None, repr=False)
    phi_log: np.ndarray = field(default=None, repr=False)
    initial_state: np.ndarray = field(default=None, repr=False)
    full_states: np.ndarray | None = field(default=None, repr=False)
    failed_solves: int = 0

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accept_log)) if self.accept_log.size else 0.0

    @property
    def posterior_mean(self):
        return self.running_mean

    @property
    def posterior_variance(self):
        if self.n_post == 0:
            return np.full_like(self.running_mean, np.nan)
        return self.running_m2 / self.n_post

    def node_series(self, node):
        """Per-iteration values at ``node`` if traced, else the thinned stored states."""
        if node in self.trace_nodes:
            return self.traces[self.trace_nodes.index(node)]
        return self.states[:, node]

    def post_burn_series(self, node):
        if node in self.trace_nodes:
            return self.traces[self.trace_nodes.index(node)][self.n_burn + 1:]
        return self.states[:, node]


def likelihood_potential(y, forward):
    """Callable ``V -> Phi(V; y)`` for a forward operator."""
    def phi(V):
        return neg_log_likelihood(y, forward(V))
    return phi


def run_chain(config, y, prior, forward, seed, *, potential=None):
    """Run a pCN (or random-walk) Metropolis chain.

    Parameters
    ----------
    config : SamplerConfig
    y : Observation or None
    prior : MaternPrior
    forward : callable or None
        Map from a nodal potential to predicted observations.
    seed : int
    potential : callable, optional
        Negative log-likelihood ``V -> Phi``; overrides ``y`` and ``forward``.

    Returns
    -------
    Chain
    """
    if potential is None:
        if y is None or forward is None:
            raise DomainError("either a potential or both data and forward map are required")
        potential = likelihood_potential(y, forward)

    rng = np.random.default_rng(seed)
    k = prior.n_kl
    n = prior.n_nodes
    beta = float(config.beta)
    pcn = config.kind == "pcn"
    shrink = math.sqrt(1.0 - beta * beta) if pcn else 1.0
    active = prior.eigenvalues > 0.0
    modes = prior.scaled_modes
    m0 = prior.mean

    xi = rng.standard_normal(k)
    V = m0 + modes @ xi
    V0 = V.copy()
    phi = potential(V)
    if not np.isfinite(phi):
        raise SolverError("negative log-likelihood of the initial state is not finite")
    logprior = -0.5 * float(xi[active] @ xi[active])

    n_total, n_burn, thin = config.n_total, config.n_burn, config.thin
    n_post_total = n_total - n_burn
    n_store = n_post_total // thin
    states = np.empty((n_store, n))
    full = np.empty((n_total + 1, n)) if config.store_full_chain else None
    if full is not None:
        full[0] = V
    trace_nodes = tuple(config.trace_nodes)
    bad = [t for t in trace_nodes if not 0 <= t < n]
    if bad:
        raise DomainError(f"trace nodes out of range: {bad}")
    traces = np.empty((len(trace_nodes), n_total + 1))
    tn = np.array(trace_nodes, dtype=np.int64)
    traces[:, 0] = V[tn]
    accept_log = np.zeros(n_total, dtype=bool)
    phi_log = np.empty(n_total + 1)
    phi_log[0] = phi
    mean = np.zeros(n)
    m2 = np.zeros(n)
    count = 0
    failed = 0
    stored = 0

    for i in range(1, n_total + 1):
        zeta = rng.standard_normal(k)
        u = rng.random()
        xi_new = shrink * xi + beta * zeta
        V_new = m0 + modes @ xi_new
        try:
            phi_new = potential(V_new)
            ok = bool(np.isfinite(phi_new))
        except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.warning("forward solve failed at iteration %d: %s", i, exc)
            ok = False
        if not ok:
            failed += 1
        elif pcn:
            if pcn_accept(phi, phi_new, u):
                xi, V, phi = xi_new, V_new, phi_new
                accept_log[i - 1] = True
        else:
            logprior_new = -0.5 * float(xi_new[active] @ xi_new[active])
            if rw_accept(phi, phi_new, logprior, logprior_new, u):
                xi, V, phi, logprior = xi_new, V_new, phi_new, logprior_new
                accept_log[i - 1] = True

        traces[:, i] = V[tn]
        phi_log[i] = phi
        if full is not None:
            full[i] = V
        if i > n_burn:
            count += 1
            delta = V - mean
            mean += delta / count
            m2 += delta * (V - mean)
            if (i - n_burn) % thin == 0:
                states[stored] = V
                stored += 1

    if failed:
        logger.warning("%d forward solves failed and were counted as rejections", failed)
    return Chain(beta=beta, n_total=n_total, n_burn=n_burn, thin=thin, kind=config.kind,
                 accept_log=accept_log, running_mean=mean, running_m2=m2, n_post=count,
                 states=states, trace_nodes=trace_nodes, traces=traces, phi_log=phi_log,
                 initial_state=V0, full_states=full,
                 failed_solves=failed)


def chain_summary(chain, node_ids):
    """Trace, histogram and moments for selected nodes.

    Returns
    -------
    dict
        ``acceptance_rate``, ``failed_solves`` and, per node id, a dict with
        ``trace`` (thinned), ``hist_counts``, ``hist_edges``, ``mean`` and
        ``variance``.
    """
    if chain.n_post == 0:
        raise DomainError("chain has no post-burn-in states")
    n = chain.running_mean.size
    nodes = {}
    for node in node_ids:
        node = int(node)
        if not 0 <= node < n:
            raise DomainError(f"node id {node} out of range")
        post = chain.post_burn_series(node)
        lo, hi = float(post.min()), float(post.max())
        if lo == hi:
            counts, edges = np.array([post.size]), np.array([lo, hi])
        else:
            counts, edges = np.histogram(post, bins=HISTOGRAM_BINS, range=(lo, hi))
        if node in chain.trace_nodes:
            trace = chain.node_series(node)[::chain.thin]
        else:
            trace = chain.states[:, node]
        nodes[node] = {
            "trace": trace,
            "hist_counts": counts,
            "hist_edges": edges,
            "mean": float(chain.running_mean[node]),
            "variance": float(chain.posterior_variance[node]),
        }
    return {"acceptance_rate": chain.acceptance_rate, "failed_solves": chain.failed_solves,
            "nodes": nodes}
