"""Experiment configuration: YAML files validated against a versioned JSON schema.

The schema lives next to this module (``config_schema.json``) and rejects
unknown keys; domain conditions that depend on the potentials (the ranges of
``gamma``, ``A`` and ``alpha``) are checked here before anything runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from crystal.convergence import check_growth_parameters
from crystal.dynamics import IntegratorConfig
from crystal.gibbs import GibbsConfig, sample_gibbs
from crystal.io import read_state_csv
from crystal.lattice import Cube, LatticeSpec, LatticeState, as_site
from crystal.potentials import PolynomialPotential
from crystal.tangent import check_alpha

KINDS = ("simulate", "converge", "mu-indep", "energy-growth", "lightcone", "gibbs", "superstability", "accept")
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending parameter."""


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files("crystal").joinpath("config_schema.json").read_text())


def _validate(instance, sub_schema, where: str):
    full = schema()
    validator = jsonschema.Draft202012Validator(
        {**sub_schema, "$defs": full["$defs"]}
    )
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in [where, *e.path] if p != "")
        raise ConfigError(f"{path}: {e.message}")


@dataclass
class ExperimentConfig:
    kind: str
    raw: dict
    spec: LatticeSpec | None = None
    integrator: IntegratorConfig | None = None
    params: dict = field(default_factory=dict)
    output: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def initial(self) -> dict:
        return self.raw.get("initial", {})

    def sha256(self) -> str:
        """Hash of the canonical config plus any referenced input file."""
        h = hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode())
        path = self.initial.get("path")
        if path:
            h.update((self.base_dir / path).read_bytes())
        return h.hexdigest()

    def build_initial(self, seed: int | None = None) -> LatticeState:
        return build_initial(self.spec, self.initial, self.base_dir, seed)

    def gibbs_config(self, seed: int | None = None) -> GibbsConfig:
        return gibbs_config(self.spec, self.initial, seed)


def _cube(cfg: dict, d: int) -> Cube:
    center = cfg.get("center", [0] * d)
    return Cube(as_site(center, d), cfg["radius"])


def gibbs_config(spec: LatticeSpec, init: dict, seed: int | None = None) -> GibbsConfig:
    sweeps = init.get("sweeps", 2000)
    return GibbsConfig(
        beta=init.get("beta", 1.0),
        box=_cube(init, spec.d),
        sweeps=sweeps,
        burn_in=init.get("burn_in", sweeps // 4),
        proposal_scale=init.get("proposal_scale", 1.0),
        seed=init.get("seed", 0) if seed is None else seed,
        thin=init.get("thin", 1),
        tune=init.get("tune", True),
    )


def build_initial(spec: LatticeSpec, init: dict, base_dir: Path, seed: int | None = None) -> LatticeState:
    kind = init["type"]
    if kind == "file":
        return read_state_csv(Path(base_dir) / init["path"], spec)
    if "radius" not in init:
        raise ConfigError(f"initial.radius is required for initial type {kind!r}")
    cube = _cube(init, spec.d)
    if kind == "rest":
        return LatticeState.rest(spec, cube)
    if kind == "gibbs":
        return sample_gibbs(spec, gibbs_config(spec, init, seed))
    q = np.zeros(cube.shape + (spec.nu,))
    p = np.zeros_like(q)
    site = as_site(init.get("site", [0] * spec.d), spec.d)
    q[cube.index(site)] = init.get("q", [0.0] * spec.nu)
    p[cube.index(site)] = init.get("p", [0.0] * spec.nu)
    return LatticeState(spec, cube, q, p)


def _build_spec(raw: dict) -> LatticeSpec:
    d, nu = raw["d"], raw["nu"]
    pots = {}
    for name in ("U", "V"):
        c = raw.get(name)
        try:
            pots[name] = None if c is None else PolynomialPotential.from_config(c, nu)
        except ValueError as exc:
            raise ConfigError(f"spec.{name}: {exc}") from exc
    try:
        return LatticeSpec(d, nu, pots["U"], pots["V"])
    except ValueError as exc:
        raise ConfigError(f"spec: {exc}") from exc


def _check_domains(cfg: ExperimentConfig):
    p, spec = cfg.params, cfg.spec
    try:
        if cfg.kind in ("converge", "energy-growth"):
            check_growth_parameters(spec, p["gamma"], p["beta"], p.get("A", 2.0))
        if cfg.kind == "lightcone":
            check_alpha(spec, p["alpha"])
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from exc
    if cfg.kind == "converge":
        n_list = p["n_list"]
        if any(b <= a for a, b in zip(n_list, n_list[1:])) or min(n_list) <= p["k"]:
            raise ConfigError("params.n_list: must be strictly increasing with min(n_list) > k")
    if cfg.kind in ("gibbs", "superstability") and cfg.initial.get("type") != "gibbs":
        raise ConfigError(f"initial.type: kind {cfg.kind!r} needs a 'gibbs' initial section")


def parse_config(raw: dict, kind: str | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a loaded config mapping and build its domain objects.

    Raises:
        ConfigError: on schema violations, unknown keys or out-of-range parameters.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _validate(raw, {k: v for k, v in schema().items() if k != "$defs"}, "config")
    file_kind = raw.get("kind")
    if kind is not None and file_kind is not None and kind != file_kind:
        raise ConfigError(f"kind: command line says {kind!r} but the config says {file_kind!r}")
    kind = kind or file_kind
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r}")
    params = raw.get("params", {})
    _validate(params, schema()["$defs"]["params"][kind], "params")
    cfg = ExperimentConfig(kind=kind, raw=raw, params=params, output=raw.get("output"),
                           base_dir=Path(base_dir or Path.cwd()))
    if kind == "accept":
        return cfg
    for key in ("spec", "initial", "integrator"):
        if key not in raw:
            raise ConfigError(f"{key}: required for kind {kind!r}")
    cfg.spec = _build_spec(raw["spec"])
    integ = raw["integrator"]
    try:
        cfg.integrator = IntegratorConfig(
            dt=integ["dt"],
            t_final=integ.get("t_final", 0.0),
            scheme=integ.get("scheme", "velocity-verlet"),
            record_stride=integ.get("record_stride", 1),
        )
    except ValueError as exc:
        raise ConfigError(f"integrator: {exc}") from exc
    _check_domains(cfg)
    return cfg


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, kind, path.parent)
