"""Experiment configuration: one YAML file that fully determines a run.

Two built-in profiles exist.  ``paper-full`` carries the reference setup (10 clients,
4 heads, 500 channels, 50 local iterations, 500/250/128 hidden units); ``paper-small``
is the desk-scale variant used by the test suite.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .fed import ALGORITHMS, FedConfig
from .ofdm import ChannelParams

PROFILES = ("paper-full", "paper-small")
AXES = ("snr", "hetero_snr", "rician", "mixed")


@dataclass
class DataConfig:
    n_channels: int = 500
    snr_db: float | None = 10.0
    rician_k_db: float | None = None
    pilot_comb: int = 0
    pilot_boost: bool = False
    pilot_seed: int = 2024
    validation_frames: int = 500
    validation_seed: int = 1000


@dataclass
class NcValidateConfig:
    max_bits: int = 6
    max_replication: int = 4
    max_feature_dim: int = 3
    solver_bits: int = 2
    solver_replication: int = 2
    solver_feature_dim: int = 8
    lam: float = 0.01
    max_iters: int = 20000
    step_size: float = 1.0
    loss_tol: float = 1e-3
    collapse_tol: float = 1e-2
    grad_cases: int = 20
    grad_rel_tol: float = 1e-5


@dataclass
class SweepSpec:
    axis: str = "snr"
    values: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    algorithms: list = field(default_factory=lambda: ["ncdsfl", "fedavg", "il", "mmse"])
    seeds: list = field(default_factory=lambda: [0])
    resume: bool = False

    def validate(self):
        if self.axis not in AXES:
            raise ConfigError(f"sweep axis must be one of {AXES}")
        if self.axis != "mixed" and not self.values:
            raise ConfigError("sweep axis has no values")
        if not self.algorithms:
            raise ConfigError("sweep needs at least one algorithm")
        bad = [a for a in self.algorithms if a not in ALGORITHMS + ("mmse",)]
        if bad:
            raise ConfigError(f"unknown algorithms {bad}")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        return self


@dataclass
class ExperimentConfig:
    profile: str = "paper-full"
    seed: int = 0
    out_dir: str = "runs"
    jobs: int = 1
    threshold: float = 0.05
    window: int = 5
    channel: ChannelParams = field(default_factory=ChannelParams)
    data: DataConfig = field(default_factory=DataConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    nc_validate: NcValidateConfig = field(default_factory=NcValidateConfig)

    def validate(self):
        if self.profile not in PROFILES + ("custom",):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if not 0 < self.threshold < 1 or self.window < 1:
            raise ConfigError("threshold must lie in (0, 1) and window must be positive")
        if self.data.n_channels < 1 or self.data.validation_frames < 1:
            raise ConfigError("n_channels and validation_frames must be positive")
        if self.data.pilot_comb < 0 or (self.data.pilot_comb and 64 % self.data.pilot_comb):
            raise ConfigError("pilot_comb must be 0 or a divisor of 64")
        nv = self.nc_validate
        for name in ("loss_tol", "collapse_tol", "grad_rel_tol", "lam", "step_size"):
            if not getattr(nv, name) > 0:
                raise ConfigError(f"nc_validate.{name} must be positive")
        if min(nv.max_bits, nv.max_replication, nv.max_feature_dim, nv.grad_cases, nv.max_iters) < 1:
            raise ConfigError("nc_validate sizes must be positive")
        if self.channel.n_paths < 1 or self.channel.max_delay < 0:
            raise ConfigError("channel needs at least one path and a nonnegative max delay")
        self.fed.seed = self.seed
        self.fed.validate()
        self.sweep.validate()
        return self

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())


_SECTIONS = {
    "channel": ChannelParams,
    "data": DataConfig,
    "fed": FedConfig,
    "sweep": SweepSpec,
    "nc_validate": NcValidateConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = copy.deepcopy(d)
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in d:
            kwargs[key] = _build(cls, d.pop(key), key)
    kwargs.update(d)
    cfg = _build(ExperimentConfig, kwargs, "config")
    _check_types(cfg)
    return cfg.validate()


def _check_types(cfg):
    for name in ("seed", "jobs", "window"):
        if isinstance(getattr(cfg, name), bool) or not isinstance(getattr(cfg, name), int):
            raise ConfigError(f"{name} must be an integer")
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.type in ("int",) and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{sec}.{f.name} must be an integer")
            if f.type in ("float",) and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{sec}.{f.name} must be a number")


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def loads(text, base=None):
    """Parse YAML; keys missing from ``text`` are taken from ``base`` (a config) or the defaults."""
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    if base is not None:
        d = _merge(base.to_dict(), d)
    return from_dict(d)


def load(path, base=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, base)


def profile(name):
    """Built-in profile by name."""
    if name == "paper-full":
        return ExperimentConfig(profile="paper-full").validate()
    if name == "paper-small":
        cfg = ExperimentConfig(profile="paper-small")
        cfg.data.n_channels = 100
        cfg.fed = FedConfig(n_clients=4, heads_per_client=1, rounds=150, local_iters=20)
        cfg.sweep.values = [0.0, 10.0, 20.0]
        cfg.sweep.algorithms = ["ncdsfl", "fedavg", "mmse"]
        return cfg.validate()
    raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
