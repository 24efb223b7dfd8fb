"""Experiment configuration.

Config files are line oriented::

    # comment
    device.U = 5
    prior.n_kl = 100

Unknown sections or keys are errors, so a typo cannot silently fall back to a
default in a long run.  Missing keys take the defaults below, which describe
the reference diode experiment.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, get_type_hints

from .exceptions import ConfigError

# config keys that are not valid Python identifiers
_ALIASES = {("device", "lambda"): "lam"}
_REVERSE_ALIASES = {(s, f): k for (s, k), f in _ALIASES.items()}


@dataclass(frozen=True)
class MeshConfig:
    nx: int = 20
    ny: int = 20


@dataclass(frozen=True)
class DeviceConfig:
    lam: float = 1.0
    delta: float = 1.0
    mu_n: float = 1.0
    V_bi: float = 0.6
    U: float = 2.0
    flux_weight: str = "nodal"


@dataclass(frozen=True)
class TruthConfig:
    C_N: float = 1.0
    C_P: float = 2.0


@dataclass(frozen=True)
class PriorConfig:
    sigma2: float = 0.01
    nu: float = 1.0
    ell: float = 0.7
    n_kl: int = 441
    mean_mode: str = "perturbation"
    perturb_scale: float = 0.02
    mean_seed: int = 1
    guess_doping: float = 0.0


@dataclass(frozen=True)
class NoiseConfig:
    sigma_n2: float = 0.01
    data_seed: int = 2
    data_mesh_refine: int = 1


@dataclass(frozen=True)
class SamplerSection:
    kind: str = "pcn"
    beta: float = 0.2
    n_total: int = 100_000
    n_burn: Optional[int] = None
    thin: int = 10
    chain_seed: int = 3


@dataclass(frozen=True)
class ReconstructConfig:
    boundary_points: int = 5
    band_rows: int = 3


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "dopinv_out"
    trace_nodes: Optional[tuple] = None
    store_full_chain: bool = False
    kl_cache: str = ""


_SECTIONS = {
    "mesh": MeshConfig,
    "device": DeviceConfig,
    "truth": TruthConfig,
    "prior": PriorConfig,
    "noise": NoiseConfig,
    "sampler": SamplerSection,
    "reconstruct": ReconstructConfig,
    "output": OutputConfig,
}

_CHOICES = {
    ("device", "flux_weight"): ("nodal", "builtin"),
    ("prior", "mean_mode"): ("perturbation", "poisson_guess"),
    ("sampler", "kind"): ("pcn", "rw"),
    ("reconstruct", "boundary_points"): (4, 5),
}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(section, name, text):
    cls = _SECTIONS[section]
    hint = get_type_hints(cls)[name]
    text = text.strip()
    optional = hint in (Optional[int], Optional[tuple])
    if optional and text.lower() in ("", "none", "auto"):
        return None
    if hint is bool:
        return _parse_bool(text)
    if hint in (int, Optional[int]):
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if hint is Optional[tuple]:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    raise TypeError(f"no converter for {hint}")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def split_key(key):
    """``"device.lambda"`` -> ``("device", "lam")``; raises ConfigError if unknown."""
    section, dot, name = key.strip().partition(".")
    if not dot or section not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    name = _ALIASES.get((section, name), name)
    if name not in {f.name for f in dataclasses.fields(_SECTIONS[section])}:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration of one experiment (all sections, defaults filled in)."""

    mesh: MeshConfig = field(default_factory=MeshConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        for (section, name), allowed in _CHOICES.items():
            value = getattr(getattr(self, section), name)
            if value not in allowed:
                raise ConfigError(f"{self._key(section, name)} must be one of {allowed}, "
                                  f"got {value!r}")
        if self.mesh.nx < 2 or self.mesh.ny < 2:
            raise ConfigError("mesh.nx and mesh.ny must be at least 2")
        if self.noise.data_mesh_refine < 1:
            raise ConfigError("noise.data_mesh_refine must be a positive integer")
        n_nodes = (self.mesh.nx + 1) * (self.mesh.ny + 1)
        if not 1 <= self.prior.n_kl <= n_nodes:
            raise ConfigError(f"prior.n_kl must lie in [1, {n_nodes}], got {self.prior.n_kl}")
        if self.output.trace_nodes is not None:
            bad = [k for k in self.output.trace_nodes if not 0 <= k < n_nodes]
            if bad:
                raise ConfigError(f"output.trace_nodes out of range: {bad}")

    @staticmethod
    def _key(section, name):
        return f"{section}.{_REVERSE_ALIASES.get((section, name), name)}"

    # construction

    @classmethod
    def from_mapping(cls, mapping):
        """Build from ``{"section.key": value}``; string values are parsed."""
        sections = {s: {} for s in _SECTIONS}
        for key, value in mapping.items():
            section, name = split_key(key)
            if isinstance(value, str):
                try:
                    value = _convert(section, name, value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {exc}") from exc
            elif isinstance(value, list):
                value = tuple(value)
            sections[section][name] = value
        try:
            return cls(**{s: _SECTIONS[s](**kw) for s, kw in sections.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_text(cls, text, source="<config>"):
        return cls.from_mapping(parse_assignments(text, source))

    @classmethod
    def from_file(cls, path, overrides=()):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_assignments(text, str(path))
        values.update(parse_overrides(overrides))
        return cls.from_mapping(values)

    def with_overrides(self, overrides):
        """Copy with ``key=value`` strings or a ``{key: value}`` mapping applied."""
        if not isinstance(overrides, dict):
            overrides = parse_overrides(overrides)
        values = self.to_dict()
        values.update(overrides)
        return ExperimentConfig.from_mapping(values)

    # export

    def to_dict(self):
        """Flat ``{"section.key": value}`` with every key present."""
        out = {}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                out[self._key(section, f.name)] = list(value) if isinstance(value, tuple) else value
        return out

    def to_text(self):
        lines = []
        for key, value in self.to_dict().items():
            value = tuple(value) if isinstance(value, list) else value
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def seeds(self):
        return {"mean_seed": self.prior.mean_seed, "data_seed": self.noise.data_seed,
                "chain_seed": self.sampler.chain_seed}

    @property
    def n_nodes(self):
        return (self.mesh.nx + 1) * (self.mesh.ny + 1)

    def resolved_trace_nodes(self):
        """Trace nodes; by default the first, 200th and 400th nodes scaled to the mesh size."""
        if self.output.trace_nodes is not None:
            return tuple(self.output.trace_nodes)
        n = self.n_nodes
        return tuple(sorted({round(k * (n - 1) / 440) for k in (0, 199, 399)}))


def parse_assignments(text, source="<config>"):
    """Parse ``section.key = value`` lines into an ordered dict of raw strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        try:
            split_key(key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        values[key] = value.strip()
    return values


def parse_overrides(items):
    """``["device.U=5", ...]`` -> ``{"device.U": "5"}``."""
    out = {}
    for item in items or ():
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        split_key(key)
        out[key.strip()] = value.strip()
    return out


def parse_matrix(text, source="<matrix>"):
    """Sweep matrix: each line ``section.key = v1 v2 ...`` (whitespace separated).

    Returns a list of override dicts, the cartesian product in file order.
    """
    axes = []
    for key, value in parse_assignments(text, source).items():
        options = value.split()
        if not options:
            raise ConfigError(f"{source}: no values given for {key}")
        axes.append([(key, v) for v in options])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else [{}]
