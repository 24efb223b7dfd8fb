"""Acceptance checks, one marker per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one PASS/FAIL line per criterion.  The experiment checks run five full
10^5-step chains (a few minutes on one core).
"""
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad

from dopinv.bessel import modified_bessel_k
from dopinv.config import ExperimentConfig
from dopinv.experiment import run_full_experiment
from dopinv.forward import (
    DeviceParams, Observation, doping_profile, energy_ratio, forward_map, lipschitz_ratio,
    solve_equilibrium_poisson, stability_constant,
)
from dopinv.mcmc import SamplerConfig, run_chain
from dopinv.mesh_fem import assemble_operators, build_mesh, l2_error, load_vector, \
    solve_dirichlet_system
from dopinv.prior import MaternParams, MaternPrior, build_covariance, build_prior, \
    kl_decompose, matern_from_distance
from dopinv.reconstruct import doping_from_potential, junction_band

PARAMS = DeviceParams()


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def batch_se(x, n_batches=50):
    x = np.asarray(x)
    m = x.size // n_batches
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


@pytest.fixture(scope="module")
def mesh20():
    return build_mesh(20, 20)


# 1. FEM convergence

K_HALF = math.pi / 2
MANUFACTURED = {
    # both have zero normal derivative on the side walls, matching the natural condition
    "harmonic": (lambda x, y: np.cos(K_HALF * (x + 1)) * np.cosh(K_HALF * y),
                 lambda x, y: np.zeros_like(x)),
    "quadratic": (lambda x, y: y ** 2 - 0.5 * y, lambda x, y: np.full_like(x, -2.0)),
}


def manufactured_error(n, exact, source):
    mesh = build_mesh(n, n)
    K, _ = assemble_operators(mesh, np.ones(mesh.n_nodes))
    f = load_vector(mesh, source(*mesh.nodes.T))
    idx = mesh.contact_nodes
    u = solve_dirichlet_system(K, f, (idx, exact(*mesh.nodes[idx].T)))
    return l2_error(mesh, u, exact)


@pytest.mark.criterion(1)
def test_fem_second_order_convergence(request):
    t0 = time.perf_counter()
    for name, (exact, source) in MANUFACTURED.items():
        errs = np.array([manufactured_error(n, exact, source) for n in (4, 8, 16, 32)])
        ratios = errs[:-1] / errs[1:]
        detail(request, f"{name} ratios {np.round(ratios, 3).tolist()}")
        assert np.all((ratios >= 3.5) & (ratios <= 4.5)), (name, ratios)
    elapsed = time.perf_counter() - t0
    detail(request, f"{elapsed:.2f} s")
    assert elapsed < 10.0


# 2. semilinear Poisson

@pytest.mark.criterion(2)
def test_constant_doping_identity_and_newton_iterations(request, mesh20):
    C = np.full(mesh20.n_nodes, PARAMS.delta ** 2 * math.exp(PARAMS.V_bi))
    V = solve_equilibrium_poisson(mesh20, C, PARAMS)
    err = np.abs(V - PARAMS.V_bi).max()
    _, info = solve_equilibrium_poisson(mesh20, doping_profile(mesh20), PARAMS, return_info=True)
    detail(request, f"identity err {err:.1e}, Newton iterations {info['iterations']}")
    assert err <= 1e-10
    assert info["iterations"] <= 15


# 3. analytic current

@pytest.mark.criterion(3)
def test_zero_potential_gives_unit_current(request, mesh20):
    g = forward_map(mesh20, np.zeros(mesh20.n_nodes), DeviceParams(U=2.0), kind="potential")
    err = np.abs(g + 1.0).max()
    detail(request, f"m={g.size}, max |G+1| {err:.1e}")
    assert g.size == 21
    assert err <= 1e-10


# 4. stability inequalities

@pytest.mark.criterion(4)
def test_energy_and_lipschitz_ratios_bounded(request, mesh20):
    t0 = time.perf_counter()
    C_D = stability_constant(mesh20, PARAMS, headroom=0.1)
    prior = build_prior(mesh20, MaternParams(), mesh20.n_nodes, np.zeros(mesh20.n_nodes))
    rng = np.random.default_rng(2024)

    def random_field():
        f = prior.fluctuation(rng.standard_normal(prior.n_kl))
        return rng.uniform(0.0, 3.0) * f / np.abs(f).max()

    energy, lip = [], []
    for _ in range(100):
        V1, V2 = random_field(), random_field()
        assert max(np.abs(V1).max(), np.abs(V2).max()) <= 3.0
        energy.append(energy_ratio(mesh20, V1, PARAMS))
        lip.append(lipschitz_ratio(mesh20, V1, V2, PARAMS))
    elapsed = time.perf_counter() - t0
    detail(request, f"C_D {C_D:.3f}, max energy {max(energy):.3f}, max Lipschitz "
                    f"{max(lip):.3g}, {elapsed:.1f} s")
    assert max(energy) <= C_D and max(lip) <= C_D
    assert elapsed < 120.0


# 5. Bessel and kernel

def k_integral(nu, z):
    """K_nu(z) = int_0^inf exp(-z cosh t) cosh(nu t) dt, truncated where the integrand underflows."""
    upper = math.acosh(max(1.0, 750.0 / z))
    val, _ = quad(lambda t: math.exp(-z * math.cosh(t)) * math.cosh(nu * t), 0.0, upper,
                  epsabs=0.0, epsrel=1e-13, limit=400)
    return val


@pytest.mark.criterion(5)
def test_bessel_against_integral_and_exponential_kernel(request):
    z = np.geomspace(1e-2, 30.0, 50)
    worst = 0.0
    for nu in (0.0, 1.0, 0.5, 1.5):
        ref = np.array([k_integral(nu, zz) for zz in z])
        rel = np.abs(modified_bessel_k(nu, z) - ref) / ref
        worst = max(worst, rel.max())
    p = MaternParams(sigma2=0.01, nu=0.5, ell=0.7)
    d = np.linspace(0.0, 2.0 * math.sqrt(2.0), 50)
    ref = 0.01 * np.exp(-d / 0.7)
    kernel_err = (np.abs(matern_from_distance(d, p) - ref) / ref).max()
    detail(request, f"Bessel rel err {worst:.1e}, exponential kernel rel err {kernel_err:.1e}")
    assert worst <= 1e-10
    assert kernel_err <= 1e-12


# 6. KL statistics

@pytest.mark.criterion(6)
def test_kl_trace_and_sample_variance(request, mesh20):
    cov = build_covariance(mesh20, MaternParams())
    vals, vecs = kl_decompose(cov, mesh20.n_nodes)
    rel_trace = abs(vals.sum() - 4.41) / 4.41
    prior = MaternPrior(np.zeros(mesh20.n_nodes), vals, vecs)
    draws = prior.fluctuation(np.random.default_rng(6).standard_normal((prior.n_kl, 10_000)))
    probes = np.linspace(0, mesh20.n_nodes - 1, 20).astype(int)
    expected = prior.pointwise_variance()[probes]
    rel_var = np.abs(draws[probes].var(axis=1) - expected) / expected
    detail(request, f"trace rel err {rel_trace:.1e}, max variance dev {rel_var.max():.3f}")
    assert rel_trace <= 1e-8
    assert rel_var.max() <= 0.10


# 7. prior invariance

@pytest.mark.criterion(7)
def test_pcn_prior_invariance(request, mesh20):
    t0 = time.perf_counter()
    mean = 0.3 * np.sin(np.pi * mesh20.nodes[:, 0]) + 0.6
    prior = build_prior(mesh20, MaternParams(), mesh20.n_nodes, mean)
    probes = tuple(np.linspace(0, mesh20.n_nodes - 1, 20).astype(int))
    cfg = SamplerConfig(beta=0.2, n_total=50_000, trace_nodes=probes)
    chain = run_chain(cfg, None, prior, None, seed=7, potential=lambda V: 0.0)
    z = [abs(chain.post_burn_series(k).mean() - mean[k]) / batch_se(chain.post_burn_series(k))
         for k in probes]
    elapsed = time.perf_counter() - t0
    detail(request, f"acceptance {chain.acceptance_rate}, max |z| {max(z):.2f}, {elapsed:.1f} s")
    assert chain.acceptance_rate == 1.0
    assert max(z) <= 3.0
    assert elapsed < 60.0


# 8. conjugate posterior

@pytest.mark.criterion(8)
def test_conjugate_one_mode_posterior(request):
    s2, a, sigma2, y_val, m0 = 0.5, 2.0, 0.3, 1.1, 0.2
    prior = MaternPrior(np.array([m0]), np.array([s2]), np.array([[1.0]]))
    y = Observation(y=[y_val], points=[0], sigma_n2=sigma2)
    cfg = SamplerConfig(beta=0.2, n_total=100_000, trace_nodes=(0,))
    chain = run_chain(cfg, y, prior, lambda V: a * V[:1], seed=8)
    prec = 1.0 / s2 + a * a / sigma2
    mean, var = (m0 / s2 + a * y_val / sigma2) / prec, 1.0 / prec
    x = chain.post_burn_series(0)
    sq = (x - mean) ** 2
    z_mean = abs(x.mean() - mean) / batch_se(x)
    z_var = abs(sq.mean() - var) / batch_se(sq)
    detail(request, f"mean z {z_mean:.2f}, variance z {z_var:.2f}")
    assert z_mean <= 3.0 and z_var <= 3.0


# 9. reconstruction round trip

@pytest.mark.criterion(9)
def test_round_trip_reconstruction(request):
    mses = []
    for n in (10, 20, 40):
        mesh = build_mesh(n, n)
        C = doping_profile(mesh)
        C_rec = doping_from_potential(mesh, solve_equilibrium_poisson(mesh, C, PARAMS), PARAMS)
        sq = (C_rec - C) ** 2
        mses.append(sq.mean())
        if n == 20:
            band = junction_band(mesh)
            share = sq[band].sum() / sq.sum()
            rel = (np.abs(C_rec - C)[~band] / np.abs(C[~band])).max()
    detail(request, f"outside-band rel err {rel:.3f}, band share {share:.2f}, "
                    f"MSE {np.round(mses, 4).tolist()}")
    assert rel <= 0.05
    assert share >= 0.70
    assert mses[0] > mses[1] > mses[2]


# 10 and 11. full experiment

RUNS = {
    "U=2": [],
    "U=5": ["device.U=5"],
    "U=10": ["device.U=10"],
    "n_kl=100": ["prior.n_kl=100"],
    # the full KL basis on the 11 x 11 node mesh has 121 modes
    "nx=10": ["mesh.nx=10", "mesh.ny=10", "prior.n_kl=121"],
}


@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("experiment")
    results = {}
    for name, overrides in RUNS.items():
        directory = base / name.replace("=", "-")
        cfg = ExperimentConfig().with_overrides(overrides + [f"output.directory={directory}",
                                                             f"output.kl_cache={base / 'kl'}"])
        results[name] = (directory, run_full_experiment(cfg))
    return results


def mse(runs, name):
    return runs[name][1].mse_doping


@pytest.mark.slow
@pytest.mark.criterion(10, "a")
def test_reference_run_mse_band(request, experiment_runs):
    value = mse(experiment_runs, "U=2")
    detail(request, f"MSE(U=2) {value:.4f}")
    assert 0.03 <= value <= 0.15


@pytest.mark.slow
@pytest.mark.criterion(10, "b")
def test_mse_increases_with_voltage(request, experiment_runs):
    vals = [mse(experiment_runs, k) for k in ("U=2", "U=5", "U=10")]
    detail(request, f"MSE(U=5) {vals[1]:.4f}, MSE(U=10) {vals[2]:.4f}")
    assert vals[0] < vals[1] < vals[2]


@pytest.mark.slow
@pytest.mark.criterion(10, "c")
def test_truncated_kl_is_worse(request, experiment_runs):
    value, reference = mse(experiment_runs, "n_kl=100"), mse(experiment_runs, "U=2")
    detail(request, f"MSE(n_kl=100) {value:.4f}")
    assert value > reference, f"MSE(n_kl=100) {value:.4f} <= MSE(U=2) {reference:.4f}"


@pytest.mark.slow
@pytest.mark.criterion(10, "d")
def test_coarse_mesh_is_worse(request, experiment_runs):
    value, reference = mse(experiment_runs, "nx=10"), mse(experiment_runs, "U=2")
    detail(request, f"MSE(nx=10) {value:.4f}")
    assert value > reference, f"MSE(nx=10) {value:.4f} <= MSE(U=2) {reference:.4f}"


@pytest.mark.slow
@pytest.mark.criterion(10, "runtime")
def test_each_run_within_budget(request, experiment_runs):
    times = {k: rep.wall_time_seconds for k, (_, rep) in experiment_runs.items()}
    detail(request, f"slowest run {max(times.values()):.0f} s")
    assert max(times.values()) <= 30 * 60


NUMERIC_OUTPUTS = ("*.csv", "*.npy", "chain_summary.json", "metrics.json")


@pytest.mark.slow
@pytest.mark.criterion(11)
def test_repeat_run_is_byte_identical(request, experiment_runs, tmp_path):
    first, _ = experiment_runs["U=2"]
    cfg = ExperimentConfig().with_overrides([f"output.directory={tmp_path}"])
    run_full_experiment(cfg)
    names = sorted({p.name for pattern in NUMERIC_OUTPUTS for p in first.glob(pattern)})
    differing = [n for n in names if (first / n).read_bytes() != (tmp_path / n).read_bytes()]
    detail(request, f"{len(names)} files compared, {len(differing)} differ")
    assert len(names) > 10
    assert not differing
