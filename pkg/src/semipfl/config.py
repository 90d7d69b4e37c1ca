"""Experiment configuration: defaults, validation and (de)serialization."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass
class SyntheticConfig:
    n_classes: int = 4
    n_sensors: int = 6
    n_groups: int | None = None
    rotation: float = math.pi / 2
    jitter: float = 0.1
    shift: float = 0.0
    separation: float = 1.0
    noise: float = 0.2
    signature: float = 0.4
    signature_rank: int = 2
    samples_per_user: int = 1200
    samples_per_server: int = 400


@dataclass
class CsvConfig:
    paths: list[str] = field(default_factory=list)
    n_classes: int | None = None
    # recordings of these users form the server corpus, one distribution per user
    server_users: list[int] = field(default_factory=list)
    # optional explicit list of federated users; default is every other user
    users: list[int] | None = None


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    csv: CsvConfig = field(default_factory=CsvConfig)


@dataclass
class ExperimentConfig:
    rounds: int = 200
    n_users: int = 10
    labeled_per_class: int = 10
    eval_frac: float = 0.30
    labeled_frac: float = 0.20
    window: int = 30
    stride: int | None = None
    batch_size: int = 128
    local_epochs: int = 10
    mix_epochs: int = 10
    lr: float = 0.001
    mix_lr: float = 0.1
    hyper_mu: float = 0.01
    hyper_zeta: float = 0.01
    tau: float = 0.05
    min_keep: int = 32
    n_server: int = 3
    scenario: int = 1
    seed: int = 0
    dropout: float = 0.2
    ae_hidden: int | None = None
    ae_latent: int | None = None
    base_hidden: int | None = None
    embedding_dim: int = 16
    hyper_hidden: int = 100
    hyper_layers: int = 2
    embedding_std: float = 0.1
    eval_every: int = 10
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_POSITIVE_INT = ("rounds", "n_users", "window", "batch_size", "local_epochs", "mix_epochs",
                 "n_server", "embedding_dim", "hyper_hidden", "hyper_layers", "eval_every")
_POSITIVE_REAL = ("lr", "mix_lr", "hyper_mu", "hyper_zeta", "tau", "embedding_std")


def _build(cls, data, path: str, errors: list[str]):
    """Instantiate dataclass ``cls`` from a mapping, collecting key-path errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected a mapping")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else str(key)
        if key not in fields:
            errors.append(f"{key_path}: unknown key")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, key_path, errors)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _check_types(obj, path: str, errors: list[str]) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key_path = f"{path}.{f.name}" if path else f.name
        default = getattr(type(obj)(), f.name)
        if dataclasses.is_dataclass(value):
            _check_types(value, key_path, errors)
        elif value is None or default is None:
            continue
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{key_path}: expected a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{key_path}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{key_path}: expected a number")
            else:
                setattr(obj, f.name, float(value))
        elif isinstance(default, str) and not isinstance(value, str):
            errors.append(f"{key_path}: expected a string")
        elif isinstance(default, list) and not isinstance(value, list):
            errors.append(f"{key_path}: expected a list")


def check_config(cfg: ExperimentConfig) -> list[str]:
    errors: list[str] = []
    _check_types(cfg, "", errors)
    if errors:
        return errors
    for name in _POSITIVE_INT:
        if getattr(cfg, name) < 1:
            errors.append(f"{name}: must be at least 1")
    for name in _POSITIVE_REAL:
        if not getattr(cfg, name) > 0:
            errors.append(f"{name}: must be positive")
    if cfg.labeled_per_class < 0:
        errors.append("labeled_per_class: must be non-negative")
    if cfg.min_keep < 1:
        errors.append("min_keep: must be at least 1")
    if not 0 < cfg.eval_frac < 1:
        errors.append("eval_frac: must lie in (0, 1)")
    if not 0 <= cfg.labeled_frac <= 1:
        errors.append("labeled_frac: must lie in [0, 1]")
    if not 0 <= cfg.dropout < 1:
        errors.append("dropout: must lie in [0, 1)")
    if cfg.scenario not in (1, 2, 3):
        errors.append("scenario: must be 1, 2 or 3")
    if cfg.stride is not None and cfg.stride < 1:
        errors.append("stride: must be at least 1")
    for name in ("ae_hidden", "ae_latent", "base_hidden"):
        if getattr(cfg, name) is not None and getattr(cfg, name) < 1:
            errors.append(f"{name}: must be at least 1")
    ds = cfg.dataset
    if ds.kind not in ("synthetic", "csv"):
        errors.append("dataset.kind: must be 'synthetic' or 'csv'")
    elif ds.kind == "synthetic":
        syn = ds.synthetic
        if syn.n_classes < 2:
            errors.append("dataset.synthetic.n_classes: must be at least 2")
        if syn.separation <= 0:
            errors.append("dataset.synthetic.separation: must be positive")
        if syn.noise < 0:
            errors.append("dataset.synthetic.noise: must be non-negative")
        if syn.signature < 0:
            errors.append("dataset.synthetic.signature: must be non-negative")
        for name in ("n_sensors", "signature_rank", "samples_per_user", "samples_per_server"):
            if getattr(syn, name) < 1:
                errors.append(f"dataset.synthetic.{name}: must be at least 1")
    else:
        if not ds.csv.paths:
            errors.append("dataset.csv.paths: at least one file is required")
        if ds.csv.n_classes is None or ds.csv.n_classes < 2:
            errors.append("dataset.csv.n_classes: must be given and at least 2")
        if not ds.csv.server_users:
            errors.append("dataset.csv.server_users: at least one server user is required")
    return errors


def config_from_dict(data) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, data, "", errors)
    errors += check_config(cfg) if not errors else []
    if errors:
        raise ConfigurationError(errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) config file; an empty file yields all defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
