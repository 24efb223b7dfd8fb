import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dopinv import io
from dopinv.cli import EXIT_CODES, main
from dopinv.config import ExperimentConfig
from dopinv.estimator import CurrentDensityMap, DopingInversion
from dopinv.exceptions import StageError
from dopinv.experiment import ExperimentReport, run_full_experiment, run_stage, run_sweep

SMALL = ["mesh.nx=8", "mesh.ny=8", "prior.n_kl=40", "sampler.n_total=200"]


def small_cfg(tmp_path, *extra):
    return ExperimentConfig().with_overrides(SMALL + [f"output.directory={tmp_path}", *extra])


def test_full_smoke_run_writes_everything(tmp_path):
    cfg = ExperimentConfig().with_overrides([f"output.directory={tmp_path}", "sampler.n_total=10",
                                             "output.store_full_chain=true"])
    report = run_full_experiment(cfg)
    names = {p.name for p in tmp_path.iterdir()}
    for required in ("mesh_nodes.csv", "mesh_triangles.csv", "doping_true.csv",
                     "potential_true.csv", "slotboom_true.csv", "doping_true_grid.csv",
                     "observations.csv", "prior_mean.csv", "posterior_mean.csv",
                     "posterior_var.csv", "chain_summary.json", "full_chain.npy",
                     "doping_reconstructed.csv", "report.json", "manifest.json",
                     "trace_node_0.csv", "trace_node_199.csv", "trace_node_399.csv",
                     "hist_node_199.csv", "config_resolved.cfg"):
        assert required in names, required
    assert np.load(tmp_path / "full_chain.npy").shape == (11, 441)
    summary = json.loads((tmp_path / "chain_summary.json").read_text())
    for key in ("acceptance_rate", "n_total", "n_burn", "thin", "beta", "posterior_mean_file",
                "posterior_var_file", "failed_solves"):
        assert key in summary
    assert summary["n_total"] == 10
    assert 0.0 <= report.acceptance_rate <= 1.0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for entry in manifest["files"]:
        assert io.sha256_file(tmp_path / entry["path"]) == entry["sha256"]


def test_report_roundtrip_and_config_echo(tmp_path):
    cfg = small_cfg(tmp_path, "device.U=5")
    report = run_full_experiment(cfg)
    back = ExperimentReport.read(tmp_path / "report.json")
    assert back == report
    assert ExperimentConfig.from_mapping(back.config_echo) == cfg
    assert back.seeds == {"mean_seed": 1, "data_seed": 2, "chain_seed": 3}
    rerun = ExperimentConfig.from_text((tmp_path / "config_resolved.cfg").read_text())
    assert rerun == cfg


def test_stages_compose_to_full_run(tmp_path):
    full_dir, staged_dir = tmp_path / "full", tmp_path / "staged"
    run_full_experiment(small_cfg(full_dir))
    cfg = small_cfg(staged_dir)
    for stage in ("forward", "synth", "invert", "reconstruct"):
        run_stage(stage, cfg)
    for name in ("observations.csv", "posterior_mean.csv", "doping_reconstructed.csv"):
        assert (full_dir / name).read_bytes() == (staged_dir / name).read_bytes()


def test_synth_is_deterministic(tmp_path):
    a = run_stage("synth", small_cfg(tmp_path / "a"))["files"][0].read_bytes()
    b = run_stage("synth", small_cfg(tmp_path / "b"))["files"][0].read_bytes()
    c = run_stage("synth", small_cfg(tmp_path / "c", "noise.data_seed=9"))["files"][0].read_bytes()
    assert a == b and a != c


def test_invert_rejects_tampered_observations(tmp_path):
    cfg = small_cfg(tmp_path)
    path = run_stage("synth", cfg)["files"][0]
    lines = path.read_text().splitlines()
    bad = tmp_path / "tampered.csv"
    bad.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(StageError) as err:
        run_stage("invert", cfg, observations=bad)
    assert err.value.stage == "invert" and "tampered.csv" in str(err.value)


def test_reconstruct_refuses_other_mesh(tmp_path):
    run_full_experiment(small_cfg(tmp_path / "a"))
    other = small_cfg(tmp_path / "b", "mesh.nx=6", "mesh.ny=6")
    with pytest.raises(StageError, match="mesh"):
        run_stage("reconstruct", other, posterior_mean=tmp_path / "a" / "posterior_mean.csv")


def test_unknown_stage(tmp_path):
    with pytest.raises(StageError):
        run_stage("plot", small_cfg(tmp_path))


def test_short_runs_are_byte_identical(tmp_path):
    run_full_experiment(small_cfg(tmp_path / "one"))
    run_full_experiment(small_cfg(tmp_path / "two"))
    csvs = sorted(p.name for p in (tmp_path / "one").glob("*.csv"))
    assert len(csvs) > 10
    for name in csvs:
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_sweep_runs_matrix(tmp_path):
    cfg = small_cfg(tmp_path)
    results = run_sweep(cfg, [{"device.U": "2"}, {"device.U": "10"}])
    assert [o["device.U"] for o, _ in results] == ["2", "10"]
    assert (tmp_path / "U-2" / "report.json").exists()
    rows = (tmp_path / "sweep_summary.csv").read_text().splitlines()
    assert rows[0].startswith("run,device.U,mse_doping")
    assert len(rows) == 3


# command line

def write_cfg(tmp_path, *lines):
    path = tmp_path / "exp.cfg"
    path.write_text("\n".join(list(lines) + [f"output.directory = {tmp_path / 'out'}"]) + "\n")
    return path


def test_cli_full_and_stage_commands(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "mesh.nx = 8", "mesh.ny = 8", "prior.n_kl = 40",
                    "sampler.n_total = 50")
    assert main(["full", "--config", str(cfg), "--set", "device.U=5"]) == 0
    assert "mse_doping=" in capsys.readouterr().out
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["config_echo"]["device.U"] == 5.0
    for stage in ("forward", "synth", "invert", "reconstruct"):
        assert main([stage, "--config", str(cfg)]) == 0


def test_cli_error_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "mesh.nx = 8", "mesh.ny = 8", "prior.n_kl = 40",
                    "sampler.n_total = 20")
    assert main(["full", "--config", str(cfg), "--set", "prior.typo=1"]) == EXIT_CODES["config"]
    assert "[config]" in capsys.readouterr().err
    assert main(["full", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CODES["config"]
    bad = tmp_path / "obs.csv"
    bad.write_text("node_id,x,y,value\n")
    code = main(["invert", "--config", str(cfg), "--observations", str(bad)])
    assert code == EXIT_CODES["invert"]
    assert "[invert]" in capsys.readouterr().err


def test_cli_sweep(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "mesh.nx = 8", "mesh.ny = 8", "prior.n_kl = 40",
                    "sampler.n_total = 20")
    matrix = tmp_path / "sweep.cfg"
    matrix.write_text("prior.n_kl = 20 40\n")
    assert main(["sweep", "--config", str(cfg), "--matrix", str(matrix)]) == 0
    out = capsys.readouterr().out
    assert "prior.n_kl=20" in out and "prior.n_kl=40" in out
    assert (tmp_path / "out" / "manifest.json").exists()


def test_console_script_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, "mesh.nx = 4", "mesh.ny = 4", "prior.n_kl = 10",
                    "sampler.n_total = 5")
    proc = subprocess.run([sys.executable, "-m", "dopinv.cli", "forward", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert Path(proc.stdout.split()[0]).name == "mesh_nodes.csv"


# estimator wrappers

def test_current_density_transformer():
    est = CurrentDensityMap(nx=6, ny=6)
    X = np.zeros((2, 49))
    X[1] = 0.5
    out = est.fit_transform(X)
    assert out.shape == (2, 7)
    np.testing.assert_allclose(out[0], -1.0, atol=1e-12)
    np.testing.assert_allclose(out[1], -np.exp(0.5), rtol=1e-12)
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 48)))
    with pytest.raises(NotFittedError):
        CurrentDensityMap().transform(X)


def test_doping_inversion_estimator():
    forward = CurrentDensityMap(nx=6, ny=6).fit()
    y = forward.transform(np.zeros((1, 49)))[0]
    est = DopingInversion(nx=6, ny=6, n_total=300, random_state=1)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict([[0.0, 0.0]])
    est.fit(y)
    assert est.posterior_mean_.shape == (49,)
    assert 0.0 <= est.acceptance_rate_ <= 1.0
    pts = np.array([[0.0, 0.5], [-0.3, -0.7]])
    assert est.predict(pts).shape == (2,)
    assert est.predict_potential(pts).shape == (2,)
    with pytest.raises(ValueError):
        est.fit(y[:-1])
    est.set_params(prior_mean=np.zeros(49), n_kl=10, n_total=50)
    assert est.fit(y).chain_.n_total == 50
