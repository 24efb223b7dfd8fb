"""End-to-end pipeline: truth, synthetic data, sampling, reconstruction.

Each stage reads and writes plain files in ``output.directory`` so it can be
rerun on its own:

=============  ==========================================  ===========================
stage          reads                                       writes
=============  ==========================================  ===========================
forward        config                                      mesh, true fields, clean data
synth          config                                      ``observations.csv``
invert         ``observations.csv``                        prior mean, posterior moments,
                                                           traces, ``chain_summary.json``
reconstruct    ``posterior_mean.csv``                      ``doping_reconstructed.csv``,
                                                           ``metrics.json``
=============  ==========================================  ===========================

:func:`run_full_experiment` chains the four stages and adds ``report.json``,
``config_resolved.cfg`` and ``manifest.json``.  Failures are re-raised as
:class:`~dopinv.exceptions.StageError` tagged with the failing stage.
"""
from __future__ import annotations

import csv
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .exceptions import ConfigError, DopinvError, StageError
from .forward import (DeviceParams, ForwardOperator, Observation, doping_profile,
                      solve_continuity, solve_equilibrium_poisson)
from .mcmc import NoiseModel, SamplerConfig, chain_summary, run_chain, synthesize_observations
from .mesh_fem import build_mesh, write_mesh_csv
from .prior import MaternParams, build_prior, build_prior_mean
from .reconstruct import doping_from_potential, field_mse, junction_band

logger = logging.getLogger(__name__)

STAGES = ("forward", "synth", "invert", "reconstruct")

FILES = {
    "mesh_nodes": "mesh_nodes.csv",
    "mesh_triangles": "mesh_triangles.csv",
    "doping_true": "doping_true.csv",
    "potential_true": "potential_true.csv",
    "slotboom_true": "slotboom_true.csv",
    "observations_clean": "observations_clean.csv",
    "observations": "observations.csv",
    "prior_mean": "prior_mean.csv",
    "posterior_mean": "posterior_mean.csv",
    "posterior_var": "posterior_var.csv",
    "chain_summary": "chain_summary.json",
    "full_chain": "full_chain.npy",
    "doping": "doping_reconstructed.csv",
    "metrics": "metrics.json",
    "report": "report.json",
    "config": "config_resolved.cfg",
    "manifest": "manifest.json",
}


@dataclass
class ExperimentReport:
    """Headline numbers of one run plus everything needed to repeat it."""

    mse_doping: float
    mse_potential: float
    acceptance_rate: float
    wall_time_seconds: float
    config_echo: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        return io.write_json(path, self.to_dict())

    @classmethod
    def read(cls, path):
        return cls(**io.read_json(path))


# problem setup shared by the stages

def device_params(cfg):
    d = cfg.device
    return DeviceParams(lam=d.lam, delta=d.delta, mu_n=d.mu_n, V_bi=d.V_bi, U=d.U)


def matern_params(cfg):
    return MaternParams(sigma2=cfg.prior.sigma2, nu=cfg.prior.nu, ell=cfg.prior.ell)


def true_doping(cfg):
    """Callable ``mesh -> nodal doping`` for the configured diode."""
    return lambda mesh: doping_profile(mesh, cfg.truth.C_N, cfg.truth.C_P)


def _output_dir(cfg):
    path = Path(cfg.output.directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _kl_cache(cfg, out):
    return Path(cfg.output.kl_cache) if cfg.output.kl_cache else out / "cache"


@dataclass
class _Truth:
    mesh: object
    params: DeviceParams
    C_true: np.ndarray
    V_true: np.ndarray


def _truth(cfg):
    mesh = build_mesh(cfg.mesh.nx, cfg.mesh.ny)
    params = device_params(cfg)
    C = true_doping(cfg)(mesh)
    return _Truth(mesh, params, C, solve_equilibrium_poisson(mesh, C, params))


# stages

def stage_forward(cfg):
    """True doping, potential and Slotboom variable, plus the noiseless data."""
    out = _output_dir(cfg)
    t = _truth(cfg)
    mesh, params = t.mesh, t.params
    u_hat = solve_continuity(mesh, t.V_true, params)
    G = ForwardOperator(mesh, params, weight=cfg.device.flux_weight)
    written = [out / FILES["mesh_nodes"], out / FILES["mesh_triangles"]]
    write_mesh_csv(mesh, *written)
    for key, values in (("doping_true", t.C_true), ("potential_true", t.V_true),
                        ("slotboom_true", u_hat)):
        written.append(io.write_field(out / FILES[key], mesh, values))
        written.append(io.write_grid(out / FILES[key].replace(".csv", "_grid.csv"), mesh, values))
    clean = Observation(y=G(t.V_true), points=G.points, sigma_n2=cfg.noise.sigma_n2)
    written.append(io.write_observation(out / FILES["observations_clean"], mesh, clean))
    logger.info("forward stage wrote %d files to %s", len(written), out)
    return {"files": written}


def stage_synth(cfg):
    """Noisy observations from the true doping (optionally on a refined mesh)."""
    out = _output_dir(cfg)
    mesh = build_mesh(cfg.mesh.nx, cfg.mesh.ny)
    refine = cfg.noise.data_mesh_refine
    C_true = true_doping(cfg)
    obs = synthesize_observations(mesh, C_true if refine > 1 else C_true(mesh), device_params(cfg),
                                  noise=NoiseModel(cfg.noise.sigma_n2), seed=cfg.noise.data_seed,
                                  refine=refine, weight=cfg.device.flux_weight)
    path = io.write_observation(out / FILES["observations"], mesh, obs)
    return {"files": [path], "observation": obs}


def stage_invert(cfg, observations=None):
    """Sample the posterior of the equilibrium potential given observation data."""
    out = _output_dir(cfg)
    t = _truth(cfg)
    mesh, params = t.mesh, t.params
    obs_path = Path(observations) if observations else out / FILES["observations"]
    y = io.read_observation(obs_path, mesh)
    if y.sigma_n2 != cfg.noise.sigma_n2:
        logger.warning("observation file noise variance %g differs from config %g; using the file",
                       y.sigma_n2, cfg.noise.sigma_n2)
    mp = matern_params(cfg)
    cache = _kl_cache(cfg, out)
    m0 = build_prior_mean(mesh, t.C_true, params, mp, cfg.prior.perturb_scale, cfg.prior.mean_seed,
                          mode=cfg.prior.mean_mode, guess_doping=cfg.prior.guess_doping,
                          cache_dir=cache)
    prior = build_prior(mesh, mp, cfg.prior.n_kl, m0, cache_dir=cache)
    G = ForwardOperator(mesh, params, y.points, weight=cfg.device.flux_weight)
    trace_nodes = cfg.resolved_trace_nodes()
    scfg = SamplerConfig(kind=cfg.sampler.kind, beta=cfg.sampler.beta, n_total=cfg.sampler.n_total,
                         n_burn=cfg.sampler.n_burn, thin=cfg.sampler.thin, trace_nodes=trace_nodes,
                         store_full_chain=cfg.output.store_full_chain)
    t0 = time.perf_counter()
    chain = run_chain(scfg, y, prior, G, cfg.sampler.chain_seed)
    elapsed = time.perf_counter() - t0
    logger.info("chain finished: %d steps in %.1f s, acceptance %.3f",
                chain.n_total, elapsed, chain.acceptance_rate)

    written = [io.write_field(out / FILES["prior_mean"], mesh, m0),
               io.write_field(out / FILES["posterior_mean"], mesh, chain.posterior_mean),
               io.write_field(out / FILES["posterior_var"], mesh, chain.posterior_variance)]
    summary = chain_summary(chain, trace_nodes)
    traces = {}
    for node, rec in summary["nodes"].items():
        trace_file = f"trace_node_{node}.csv"
        hist_file = f"hist_node_{node}.csv"
        written.append(io.write_trace(out / trace_file, chain.node_series(node)))
        written.append(io.write_histogram(out / hist_file, rec["hist_counts"], rec["hist_edges"]))
        traces[str(node)] = {"trace_file": trace_file, "histogram_file": hist_file,
                             "mean": rec["mean"], "variance": rec["variance"]}
    if chain.full_states is not None:
        np.save(out / FILES["full_chain"], chain.full_states)
        written.append(out / FILES["full_chain"])
    written.append(io.write_json(out / FILES["chain_summary"], {
        "acceptance_rate": chain.acceptance_rate,
        "n_total": chain.n_total,
        "n_burn": chain.n_burn,
        "thin": chain.thin,
        "beta": chain.beta,
        "kind": chain.kind,
        "posterior_mean_file": FILES["posterior_mean"],
        "posterior_var_file": FILES["posterior_var"],
        "failed_solves": chain.failed_solves,
        "trace_nodes": traces,
    }))
    return {"files": written, "chain": chain, "prior_mean": m0, "sampling_seconds": elapsed}


def stage_reconstruct(cfg, posterior_mean=None):
    """Doping from the posterior-mean potential, with errors against the truth."""
    out = _output_dir(cfg)
    t = _truth(cfg)
    mesh, params = t.mesh, t.params
    path = Path(posterior_mean) if posterior_mean else out / FILES["posterior_mean"]
    V = io.read_field(path, mesh)
    C_rec = doping_from_potential(mesh, V, params, boundary_points=cfg.reconstruct.boundary_points)
    sq = (C_rec - t.C_true) ** 2
    band = junction_band(mesh, cfg.reconstruct.band_rows)
    metrics = {
        "mse_doping": field_mse(C_rec, t.C_true),
        "mse_potential": field_mse(V, t.V_true),
        "junction_band_share": float(sq[band].sum() / sq.sum()) if sq.sum() > 0 else 0.0,
        "max_abs_error_outside_band": float(np.sqrt(sq[~band].max())),
    }
    written = [io.write_doping(out / FILES["doping"], mesh, C_rec, t.C_true),
               io.write_grid(out / FILES["doping"].replace(".csv", "_grid.csv"), mesh, C_rec),
               io.write_json(out / FILES["metrics"], metrics)]
    return {"files": written, "metrics": metrics, "C_reconstructed": C_rec}


_STAGE_FUNCS = {"forward": stage_forward, "synth": stage_synth, "invert": stage_invert,
                "reconstruct": stage_reconstruct}


def run_stage(stage, cfg, **inputs):
    """Run one stage; any failure comes back as a StageError tagged ``stage``."""
    if stage not in _STAGE_FUNCS:
        raise StageError("config", f"unknown stage {stage!r}; choose from {STAGES}")
    try:
        return _STAGE_FUNCS[stage](cfg, **inputs)
    except StageError:
        raise
    except (DopinvError, ArithmeticError, OSError, ValueError) as exc:
        logger.debug("stage %s failed: %s", stage, exc)
        raise StageError(stage, str(exc)) from exc


def run_full_experiment(cfg):
    """Truth -> data -> prior -> chain -> posterior mean -> doping -> MSE.

    Writes every stage's files, the resolved config, ``report.json`` and a
    manifest.  The manifest is written even when a stage fails, so partial
    outputs remain traceable.
    """
    if not isinstance(cfg, ExperimentConfig):
        raise ConfigError("run_full_experiment expects an ExperimentConfig")
    out = _output_dir(cfg)
    (out / FILES["config"]).write_text(cfg.to_text())
    t0 = time.perf_counter()
    try:
        run_stage("forward", cfg)
        run_stage("synth", cfg)
        inv = run_stage("invert", cfg)
        rec = run_stage("reconstruct", cfg)
        report = ExperimentReport(
            mse_doping=rec["metrics"]["mse_doping"],
            mse_potential=rec["metrics"]["mse_potential"],
            acceptance_rate=inv["chain"].acceptance_rate,
            wall_time_seconds=time.perf_counter() - t0,
            config_echo=cfg.to_dict(),
            seeds=cfg.seeds(),
        )
        report.write(out / FILES["report"])
        logger.info("experiment done: mse_doping=%.4g acceptance=%.3f (%.1f s)",
                    report.mse_doping, report.acceptance_rate, report.wall_time_seconds)
        return report
    finally:
        io.write_manifest(out, _manifest_files(out))


def _manifest_files(out):
    skip = {out / FILES["manifest"]}
    return sorted(p for p in out.iterdir() if p.is_file() and p not in skip)


def _run_name(overrides):
    if not overrides:
        return "base"
    parts = [f"{k.split('.')[-1]}-{v}" for k, v in overrides.items()]
    return re.sub(r"[^A-Za-z0-9_.=-]", "_", "_".join(parts))


def run_sweep(cfg, matrix, directory=None):
    """Run the full experiment for every override set in ``matrix``.

    Parameters
    ----------
    cfg : ExperimentConfig
        Base configuration.
    matrix : list of dict
        Override sets, e.g. from :func:`dopinv.config.parse_matrix`.
    directory : path, optional
        Sweep root (default ``cfg.output.directory``); each run gets a
        subdirectory named after its overrides.

    Returns
    -------
    list of (dict, ExperimentReport)
    """
    root = Path(directory or cfg.output.directory)
    root.mkdir(parents=True, exist_ok=True)
    shared_cache = cfg.output.kl_cache or str(root / "cache")
    results = []
    for overrides in matrix:
        name = _run_name(overrides)
        run_cfg = cfg.with_overrides({**overrides, "output.directory": str(root / name),
                                      "output.kl_cache": shared_cache})
        logger.info("sweep run %s", name)
        results.append((overrides, name, run_full_experiment(run_cfg)))
    keys = sorted({k for o, _, _ in results for k in o})
    with open(root / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run"] + keys + ["mse_doping", "mse_potential", "acceptance_rate",
                                     "wall_time_seconds"])
        for o, name, rep in results:
            w.writerow([name] + [o.get(k, "") for k in keys]
                       + [format(v, ".17g") for v in (rep.mse_doping, rep.mse_potential,
                                                      rep.acceptance_rate,
                                                      rep.wall_time_seconds)])
    io.write_manifest(root, [root / "sweep_summary.csv"]
                      + [root / name / FILES["report"] for _, name, _ in results])
    return [(o, rep) for o, _, rep in results]
