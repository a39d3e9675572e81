"""JSON experiment configuration for the verification campaigns.

A config names the coefficient fields, the test function, and one section
per check family holding that family's grids and tolerances. Every
tolerance a check reads lives in these sections, and the resolved config
is embedded in each emitted summary, so a report carries its own audit
trail. Two profiles are built in: ``desk`` (minutes on one core) and
``thorough`` (larger grids, the default integration spec for J, more paths).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .field import CoefficientField, CORPUS, constant_field, corpus_field, expression_field
from .functions import TestFunction, bump, gaussian, poly_bump
from .integrate import IntegrationSpec

__all__ = [
    "ConfigError",
    "FieldCheckConfig",
    "KernelConfig",
    "Prop21Config",
    "Prop22Config",
    "Prop23Config",
    "IdentityConfig",
    "ContractionConfig",
    "UniquenessConfig",
    "ExperimentConfig",
    "PROFILES",
    "profile",
    "load_config",
    "resolve_field",
    "resolve_function",
]

PROFILES = ("desk", "thorough")


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


def _logspace(lo: float, hi: float, n: int) -> list:
    return [float(v) for v in np.logspace(lo, hi, n)]


@dataclass
class FieldCheckConfig:
    grid_n: int = 41
    box: float = 5.0
    n_pairs: int = 10_000
    fields: list | None = None


@dataclass
class KernelConfig:
    times: list = field(default_factory=lambda: [0.01, 1.0, 10.0])
    gh_nodes: int = 64
    normalization_tol: float = 1e-8
    hessian_rtol: float = 1e-6
    ck_tol: float = 1e-8
    generator_rtol: float = 1e-6


@dataclass
class Prop21Config:
    t_grid: list = field(default_factory=lambda: _logspace(-4, 3, 13))
    x_n: int = 41
    box: float = 5.0
    n_grid: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    p_list: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    tail_x_n: int = 5
    gh_nodes: int = 32
    moment_nodes: int = 16
    kappa: float = 1.0
    mass_tol: float = 1e-3
    exact_tol: float = 1e-8
    fields: list | None = None


@dataclass
class Prop22Config:
    probe_offsets: list = field(default_factory=lambda: [0.5])
    k_max: int = 14
    kappa: float = 1.0
    final_tol: float = 1e-2
    bound_rtol: float = 1e-3
    fields: list | None = None


@dataclass
class Prop23Config:
    t_small: list = field(default_factory=lambda: _logspace(-4, -1, 7))
    t_large: list = field(default_factory=lambda: _logspace(1, 3, 5))
    x_n: int = 41
    box: float = 5.0
    kappa: float = 1.0
    gh_nodes: int = 32
    slope_tol: float = 0.05
    majorant_rtol: float = 1e-12
    fields: list | None = None


@dataclass
class IdentityConfig:
    lam: float = 4.0
    eps: float = 1e-3
    x_offsets: list = field(default_factory=lambda: [0.0, 0.5, 1.7])
    frozen_tol: float = 1e-5
    fd_step: float = 0.02
    decomposition_atol: float = 1e-9
    fields: list | None = field(default_factory=lambda: ["identity-1d", "holder-1d-a0.25", "holder-2d-a0.5", "rotation-2d"])


@dataclass
class ContractionConfig:
    eps_list: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    x_n_1d: int = 41
    x_n_2d: int = 21
    box: float = 5.0
    t_grid: list = field(default_factory=lambda: _logspace(-4, 3, 13))
    safety: float = 1.0
    lam_factor: float = 2.0
    default_lam: float = 1.0
    gh_nodes: int = 32
    majorant_nodes: int = 16
    contraction_bound: float = 0.5
    integration: dict = field(
        default_factory=lambda: {"time_nodes": 4, "panel_nodes": 3, "window": 7.0, "horizon_factor": 8.0}
    )
    fields: list | None = None


@dataclass
class UniquenessConfig:
    """Scheme steps and horizons are given as lam * dt and lam * T so one spec serves every lam."""

    fields: list | None = field(default_factory=lambda: ["holder-2d-a0.5"])
    lams: list = field(default_factory=lambda: [4.0])
    lambda0_factor: float | None = 2.0
    start_offset: float = 0.5
    n_functions: int = 10
    n_residual_functions: int = 5
    n_paths: int = 100_000
    scheme_a: dict = field(default_factory=lambda: {"factorization": "cholesky", "lam_dt": 0.08, "seed_offset": 1})
    scheme_b: dict = field(default_factory=lambda: {"factorization": "spectral", "lam_dt": 0.04, "seed_offset": 2})
    lam_horizon: float = 20.0
    bias_field: str = "smooth-2d"
    bias_lam: float = 4.0
    bias_lam_dt: float = 0.04
    bias_halvings: int = 3
    bias_ratio_range: list = field(default_factory=lambda: [1.5, 3.0])
    cov_fields: list = field(default_factory=lambda: [{"kind": "constant", "matrix": [[1.5, 0.4], [0.4, 0.8]], "name": "const-aniso-2d"}])
    cov_times: list = field(default_factory=lambda: [0.5, 1.0])
    cov_paths: int = 400_000
    cov_dt: float = 0.05
    cov_rtol: float = 0.01


_SECTIONS = {
    "validate": FieldCheckConfig,
    "kernel": KernelConfig,
    "prop21": Prop21Config,
    "prop22": Prop22Config,
    "prop23": Prop23Config,
    "identity": IdentityConfig,
    "contraction": ContractionConfig,
    "uniqueness": UniquenessConfig,
}


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "frozenmix-out"
    fields: list = field(default_factory=lambda: list(CORPUS))
    g: dict = field(default_factory=lambda: {"kind": "bump", "radius": 2.0})
    integration: dict = field(default_factory=dict)
    validate: FieldCheckConfig = field(default_factory=FieldCheckConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    prop21: Prop21Config = field(default_factory=Prop21Config)
    prop22: Prop22Config = field(default_factory=Prop22Config)
    prop23: Prop23Config = field(default_factory=Prop23Config)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    contraction: ContractionConfig = field(default_factory=ContractionConfig)
    uniqueness: UniquenessConfig = field(default_factory=UniquenessConfig)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.fields:
            raise ConfigError("at least one field is required")
        for ref in self.fields:
            resolve_field(ref)
        self.integration_spec()
        IntegrationSpec(**self.contraction.integration)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        base = profile(data.get("profile", "desk"))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS:
                kwargs[key] = _section(_SECTIONS[key], getattr(base, key), value, key)
            else:
                kwargs[key] = value
        try:
            return replace(base, **kwargs)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def integration_spec(self) -> IntegrationSpec:
        try:
            return IntegrationSpec(**self.integration)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"integration: {exc}") from None

    def section_fields(self, section: str) -> list[CoefficientField]:
        refs = getattr(self, section).fields
        return [resolve_field(r) for r in (self.fields if refs is None else refs)]


def _section(cls, base, value, key):
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return replace(base, **value)


def profile(name: str) -> ExperimentConfig:
    """The built-in ``desk`` or ``thorough`` configuration."""
    if name == "desk":
        return ExperimentConfig()
    if name == "thorough":
        return ExperimentConfig(
            profile="thorough",
            prop21=Prop21Config(x_n=81, tail_x_n=9),
            prop22=Prop22Config(probe_offsets=[0.0, 0.5]),
            prop23=Prop23Config(t_small=_logspace(-4, -1, 13), x_n=81),
            identity=IdentityConfig(fields=None, x_offsets=[0.0, 0.25, 0.5, 1.0, 1.7]),
            contraction=ContractionConfig(x_n_2d=41, integration={}),
            uniqueness=UniquenessConfig(
                fields=["holder-1d-a0.25", "holder-2d-a0.25", "holder-2d-a0.5", "rotation-2d"], n_paths=400_000
            ),
        )
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")


def load_config(path: str | None, profile_name: str | None = None) -> ExperimentConfig:
    """Read a JSON config; ``profile_name`` overrides the file's profile as the base."""
    if path is None:
        return profile(profile_name or "desk")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if profile_name is not None:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = {**data, "profile": profile_name}
    return ExperimentConfig.from_dict(data)


def resolve_field(ref) -> CoefficientField:
    """A corpus name, ``{"kind": "constant", "matrix": ...}`` or an inline expression field."""
    try:
        if isinstance(ref, str):
            return corpus_field(ref)
        if not isinstance(ref, dict):
            raise ConfigError(f"field must be a name or an object, got {ref!r}")
        kind = ref.get("kind", "expression")
        if kind == "constant":
            return constant_field(np.asarray(ref["matrix"], dtype=float), name=ref.get("name"))
        if kind == "corpus":
            return corpus_field(ref["name"])
        if kind == "expression":
            args = {k: v for k, v in ref.items() if k != "kind"}
            return expression_field(**args)
        raise ConfigError(f"unknown field kind {kind!r}")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad field {ref!r}: {exc}") from None


_FUNCTIONS = {"bump": (bump, "radius"), "poly_bump": (poly_bump, "radius"), "gaussian": (gaussian, "width")}


def resolve_function(spec: dict, dim: int) -> TestFunction:
    """``{"kind": "bump" | "poly_bump" | "gaussian", "radius" or "width", "center", "amplitude"}``."""
    try:
        make, size = _FUNCTIONS[spec["kind"]]
    except (KeyError, TypeError):
        raise ConfigError(f"bad test function {spec!r}") from None
    args = {k: v for k, v in spec.items() if k != "kind"}
    if set(args) - {size, "center", "amplitude"}:
        raise ConfigError(f"bad test function {spec!r}")
    return make(dim, **args)
