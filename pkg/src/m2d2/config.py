"""Run configuration: one YAML document with six sections.

    network  NetworkConfig fields
    prior    PriorSpec fields
    m2d2     M2d2Config fields (context transforms and likelihood constants)
    train    TrainConfig fields
    data     ``dir`` (null = generate in memory) plus every SynthSpec field
    eval     bootstrap_resamples, split, seed

Missing keys take their defaults, unknown keys are rejected, and values are
validated by the section dataclasses when the file is parsed.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .fusionnet import NetworkConfig
from .m2d2prior import M2d2Config
from .synthdata import SPLITS, SynthSpec, generate, load_dataset
from .trainer import TrainConfig
from .variational import PriorSpec


@dataclass(frozen=True)
class DataConfig:
    dir: str = None
    spec: SynthSpec = field(default_factory=SynthSpec)


@dataclass(frozen=True)
class EvalConfig:
    bootstrap_resamples: int = 1000
    split: str = "test"
    seed: int = 0

    def __post_init__(self):
        if self.bootstrap_resamples < 100:
            raise ConfigError("eval.bootstrap_resamples", "must be >= 100")
        if self.split not in SPLITS:
            raise ConfigError("eval.split", f"must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    m2d2: M2d2Config = field(default_factory=M2d2Config)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, section, **changes):
        """Copy with fields of one section changed (validated again)."""
        d = to_dict(self)
        d[section].update(changes)
        return from_dict(d)

    def load_data(self):
        if self.data.dir is not None:
            return load_dataset(self.data.dir)
        return generate(self.data.spec)


SECTIONS = {
    "network": NetworkConfig,
    "prior": PriorSpec,
    "m2d2": M2d2Config,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _coerce(section, name, value, default):
    key = f"{section}.{name}"
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        # YAML 1.1 reads "2e-4" as a string, so accept numeric strings here
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def _build(section, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(section, "section must be a mapping")
    defaults = _defaults(cls)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    kwargs = {k: _coerce(section, k, v, defaults[k]) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def from_dict(raw):
    """Validate a nested mapping into a RunConfig."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS) - {"data"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    parts = {name: _build(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}
    data = dict(raw.get("data") or {})
    if not isinstance(raw.get("data") or {}, dict):
        raise ConfigError("data", "section must be a mapping")
    data_dir = data.pop("dir", None)
    if data_dir is not None and not isinstance(data_dir, str):
        raise ConfigError("data.dir", f"expected a path or null, got {data_dir!r}")
    parts["data"] = DataConfig(data_dir, _build("data", SynthSpec, data))
    return RunConfig(**parts)


def to_dict(cfg):
    """Fully resolved nested dict (defaults filled, tuples as lists)."""

    def plain(obj):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}

    out = {name: plain(getattr(cfg, name)) for name in SECTIONS}
    data = {"dir": cfg.data.dir}
    data.update(plain(cfg.data.spec))
    out["data"] = data
    return {k: out[k] for k in ("network", "prior", "m2d2", "train", "data", "eval")}


def load_config(path):
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"{path} is not valid YAML: {exc}") from None
    return from_dict(raw)


def dump_config(cfg):
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def config_hash(cfg):
    """sha256 over the canonical JSON form of the resolved config."""
    text = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
