"""Plain-text artifact formats.

Every numeric value is written with 17 significant digits, so fields survive a
write/read cycle bit for bit and repeated runs give byte-identical files.
Nodal fields carry a ``# mesh_hash=`` line that is checked on reading.
"""
from __future__ import annotations

import hashlib
import io as _io
import json
import warnings
from pathlib import Path

import numpy as np

from .exceptions import DomainError, MeshMismatchError

FLOAT_FMT = "%.17g"


def _read_table(path):
    """Return ``(meta, header, data)`` for a CSV with optional ``# key=value`` lines."""
    path = Path(path)
    meta = {}
    lines = path.read_text().splitlines()
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        key, _, value = lines[k][1:].strip().partition("=")
        meta[key.strip()] = value.strip()
        k += 1
    if k >= len(lines):
        raise DomainError(f"{path}: missing header line")
    header = lines[k].split(",")
    body = "\n".join(lines[k + 1:])
    try:
        with warnings.catch_warnings():
            # an empty body is handled below
            warnings.simplefilter("ignore", UserWarning)
            data = np.loadtxt(_io.StringIO(body), delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DomainError(f"{path}: malformed numeric content ({exc})") from exc
    if data.size == 0:
        data = np.empty((0, len(header)))
    if data.shape[1] != len(header):
        raise DomainError(f"{path}: expected {len(header)} columns, found {data.shape[1]}")
    return meta, header, data


def _write_table(path, header, columns, fmt, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.column_stack(columns) if columns else np.empty((0, 0))
    with open(path, "w", newline="\n") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={value}\n")
        np.savetxt(fh, data, fmt=fmt, delimiter=",", header=",".join(header), comments="")
    return path


def write_field(path, mesh, values):
    """Nodal field as ``node_id,value`` tagged with the mesh hash."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise MeshMismatchError(f"field has {values.shape} values, mesh has {mesh.n_nodes} nodes")
    return _write_table(path, ["node_id", "value"], [np.arange(mesh.n_nodes), values],
                        ["%d", FLOAT_FMT], meta={"mesh_hash": mesh.mesh_hash})


def read_field(path, mesh):
    """Read a nodal field, refusing files written for a different mesh."""
    meta, header, data = _read_table(path)
    if header != ["node_id", "value"]:
        raise DomainError(f"{path}: unexpected header {header}")
    tag = meta.get("mesh_hash")
    if tag != mesh.mesh_hash:
        raise MeshMismatchError(f"{path}: field belongs to mesh {tag}, expected {mesh.mesh_hash}")
    if data.shape[0] != mesh.n_nodes or not np.array_equal(data[:, 0], np.arange(mesh.n_nodes)):
        raise MeshMismatchError(f"{path}: node ids do not match the {mesh.n_nodes}-node mesh")
    return data[:, 1].copy()


def write_observation(path, mesh, obs):
    """Observation as ``node_id,x,y,value``; noise variance and mesh hash in the preamble."""
    pts = obs.points
    xy = mesh.nodes[pts]
    return _write_table(path, ["node_id", "x", "y", "value"], [pts, xy[:, 0], xy[:, 1], obs.y],
                        ["%d", FLOAT_FMT, FLOAT_FMT, FLOAT_FMT],
                        meta={"mesh_hash": mesh.mesh_hash,
                              "sigma_n2": format(obs.sigma_n2, ".17g")})


def read_observation(path, mesh, expected_points=None):
    """Read and validate an observation file against ``mesh``.

    ``expected_points`` (default: all GammaN nodes) fixes the measurement
    layout; a file with a different length or node order is rejected with
    the file name in the message.
    """
    from .forward import Observation

    meta, header, data = _read_table(path)
    if header != ["node_id", "x", "y", "value"]:
        raise DomainError(f"{path}: unexpected header {header}")
    if meta.get("mesh_hash") != mesh.mesh_hash:
        raise MeshMismatchError(f"{path}: observations belong to mesh {meta.get('mesh_hash')}, "
                                f"expected {mesh.mesh_hash}")
    expected = mesh.gamma_n if expected_points is None else np.asarray(expected_points)
    if data.shape[0] != expected.size:
        raise DomainError(f"{path}: expected {expected.size} observations, found {data.shape[0]}")
    pts = data[:, 0].astype(np.int64)
    if not np.array_equal(pts, expected):
        raise DomainError(f"{path}: measurement nodes differ from the expected layout")
    try:
        sigma_n2 = float(meta["sigma_n2"])
        return Observation(y=data[:, 3], points=pts, sigma_n2=sigma_n2)
    except (KeyError, ValueError) as exc:
        raise DomainError(f"{path}: invalid observation file ({exc})") from exc


def write_trace(path, series):
    """Chain trace as ``iter,value``."""
    series = np.asarray(series, dtype=float)
    return _write_table(path, ["iter", "value"], [np.arange(series.size), series],
                        ["%d", FLOAT_FMT])


def read_trace(path):
    _, _, data = _read_table(path)
    return data[:, 1].copy()


def write_histogram(path, counts, edges):
    counts = np.asarray(counts)
    return _write_table(path, ["bin_left", "bin_right", "count"],
                        [edges[:-1], edges[1:], counts], [FLOAT_FMT, FLOAT_FMT, "%d"])


def write_doping(path, mesh, C_reconstructed, C_true):
    """Doping comparison ``node_id,x,y,C_reconstructed,C_true,abs_error``."""
    C_rec = np.asarray(C_reconstructed, dtype=float)
    C_true = np.asarray(C_true, dtype=float)
    if C_rec.shape != (mesh.n_nodes,) or C_true.shape != (mesh.n_nodes,):
        raise MeshMismatchError("doping fields do not match the mesh")
    cols = [np.arange(mesh.n_nodes), mesh.nodes[:, 0], mesh.nodes[:, 1], C_rec, C_true,
            np.abs(C_rec - C_true)]
    return _write_table(path, ["node_id", "x", "y", "C_reconstructed", "C_true", "abs_error"],
                        cols, ["%d"] + [FLOAT_FMT] * 5, meta={"mesh_hash": mesh.mesh_hash})


def write_grid(path, mesh, values):
    """Surface-plot triples ``x,y,value`` in node order."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise MeshMismatchError("grid values do not match the mesh")
    return _write_table(path, ["x", "y", "value"], [mesh.nodes[:, 0], mesh.nodes[:, 1], values],
                        FLOAT_FMT)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # json writes floats with repr, which round-trips exactly
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(directory, files=None, name="manifest.json"):
    """List files under ``directory`` with sizes and SHA-256 digests.

    ``files`` defaults to every regular file below ``directory`` except the
    manifest itself.
    """
    directory = Path(directory)
    target = directory / name
    if files is None:
        files = sorted(p for p in directory.rglob("*") if p.is_file() and p != target)
    entries = []
    for p in sorted(Path(f) for f in files):
        entries.append({"path": p.relative_to(directory).as_posix(),
                        "bytes": p.stat().st_size, "sha256": sha256_file(p)})
    return write_json(target, {"files": entries})
