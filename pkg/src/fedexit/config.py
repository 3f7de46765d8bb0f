"""Experiment configuration.

A YAML file with optional sections; every knob has a default, unknown keys
are rejected, and validation reports every problem at once rather than one
per run. Values can be overridden from the command line with dotted keys
like `federation.rounds=50`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .adapters import AdapterMethod
from .backbone import BackboneConfig
from .data import PartitionSpec
from .federation import PERSONALIZATION_MODES, FederationConfig


class ConfigError(ValueError):
    pass


DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    batch_size: int = 32
    base_lr: float = 0.1
    min_lr: float = 0.0
    samples: int = 4000
    num_classes: int = 8
    cluster_std: float = 0.25
    label_map_seed: int = 100
    noise_seed: int = 100
    seed: int = 0
    accuracy_floor: float = 0.90

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.samples < 1 or self.num_classes < 2:
            raise ValueError("samples must be >= 1 and num_classes >= 2")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    samples: int = 4000
    test_samples: int = 1000
    num_classes: int = 8
    cluster_std: float = 0.25
    label_map_seed: int = 0
    noise_seed: int = 0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.source not in ("synth", "idx"):
            raise ValueError(f"source must be 'synth' or 'idx', got {self.source!r}")
        if self.source == "synth" and (self.samples < 1 or self.num_classes < 2):
            raise ValueError("samples must be >= 1 and num_classes >= 2")
        if self.source == "idx":
            missing = [f for f in ("images", "labels", "test_images", "test_labels")
                       if not getattr(self, f)]
            if missing:
                raise ValueError(f"idx source needs paths for {missing}")


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 5e-3
    min_lr: float = 0.0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class PersonalizeConfig:
    mode: str = "client_token_only"
    severity: int = 3
    epochs: int = 10
    clients: int = 20
    batch_size: int = 10
    base_lr: float = 5e-3
    holdout_fraction: float = 1 / 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in PERSONALIZATION_MODES:
            raise ValueError(f"mode must be one of {PERSONALIZATION_MODES}, got {self.mode!r}")
        if not (0 <= self.severity <= 5):
            raise ValueError("severity must be in 0..5")
        if self.epochs < 1 or self.clients < 1:
            raise ValueError("epochs and clients must be >= 1")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must be in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "experiment"
    dtype: str = "f32"
    init_seed: int = 0
    out_dir: str = ""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition_kind: str = "lda"
    partition_alpha: float = 0.1
    partition_seed: int = 0
    method: AdapterMethod = field(default_factory=lambda: AdapterMethod("accumulator"))
    federation: FederationConfig = field(
        default_factory=lambda: FederationConfig(num_clients=40, rounds=50))
    optim: OptimConfig = field(default_factory=OptimConfig)
    personalize: PersonalizeConfig = field(default_factory=PersonalizeConfig)

    def np_dtype(self):
        return DTYPES[self.dtype]

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(num_clients=self.federation.num_clients,
                             kind=self.partition_kind, alpha=self.partition_alpha,
                             seed=self.partition_seed)

    def resolved_out_dir(self) -> str:
        return self.out_dir or f"runs/{self.experiment}"


_SECTIONS = {
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
    "method": AdapterMethod,
    "federation": FederationConfig,
    "optim": OptimConfig,
    "personalize": PersonalizeConfig,
}
_PARTITION_KEYS = {"kind": "partition_kind", "alpha": "partition_alpha",
                   "seed": "partition_seed"}
_FALLBACKS = {
    "method": lambda: AdapterMethod("accumulator"),
    "federation": lambda: FederationConfig(num_clients=40, rounds=50),
}
_SECTION_DEFAULTS = {
    "method": {"name": "accumulator"},
    "federation": {"num_clients": 40, "rounds": 50},
}
_SCALARS = {"experiment": str, "dtype": str, "init_seed": int, "out_dir": str}


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set dotted keys, e.g. federation.rounds=50; values parse as YAML."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r} has an empty key segment")
        node = raw
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into non-section {part!r}")
            node = nxt
        try:
            node[parts[-1]] = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: bad value ({e})") from e
    return raw


def _build_section(cls, section: str, given: dict, errors: list[str]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(given) - names)
    if unknown:
        errors.append(f"{section}: unknown keys {unknown}")
    kwargs = dict(_SECTION_DEFAULTS.get(section, {}))
    kwargs.update({k: v for k, v in given.items() if k in names})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        errors.append(f"{section}: {e}")
        return _FALLBACKS.get(section, cls)()


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping and produce the resolved config. Raises
    ConfigError listing every problem found."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    errors: list[str] = []
    allowed = set(_SECTIONS) | set(_SCALARS) | {"partition"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        errors.append(f"unknown top-level keys {unknown}")

    top: dict = {}
    for key, typ in _SCALARS.items():
        if key in raw:
            val = raw[key]
            if not isinstance(val, typ) or isinstance(val, bool):
                errors.append(f"{key}: expected {typ.__name__}, got {val!r}")
            else:
                top[key] = val
    if "dtype" in top and top["dtype"] not in DTYPES:
        errors.append(f"dtype: must be one of {sorted(DTYPES)}, got {top['dtype']!r}")
        del top["dtype"]

    for section, cls in _SECTIONS.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            errors.append(f"{section}: expected a mapping, got {given!r}")
            given = {}
        top[section] = _build_section(cls, section, given, errors)

    part = raw.get("partition", {})
    if not isinstance(part, dict):
        errors.append(f"partition: expected a mapping, got {part!r}")
        part = {}
    unknown = sorted(set(part) - set(_PARTITION_KEYS))
    if unknown:
        errors.append(f"partition: unknown keys {unknown}")
    for src, dst in _PARTITION_KEYS.items():
        if src in part:
            top[dst] = part[src]

    cfg = None
    if not errors:
        try:
            cfg = ExperimentConfig(**top)
        except (TypeError, ValueError) as e:
            errors.append(str(e))
    if cfg is not None:
        errors.extend(_cross_checks(cfg))
    if errors:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(errors))
    return cfg


def _cross_checks(cfg: ExperimentConfig) -> list[str]:
    errors = []
    if cfg.data.source == "synth" and cfg.pretrain.label_map_seed == cfg.data.label_map_seed:
        errors.append("pretrain.label_map_seed must differ from data.label_map_seed "
                      "(the backbone would be pretrained on the downstream class layout)")
    if cfg.partition_kind == "lda" and cfg.partition_alpha <= 0:
        errors.append("partition.alpha must be positive for lda")
    if cfg.partition_kind not in ("lda", "iid"):
        errors.append(f"partition.kind must be 'lda' or 'iid', got {cfg.partition_kind!r}")
    if (cfg.federation.setting == "multitier"
            and cfg.federation.num_clients < cfg.backbone.depth):
        errors.append(f"multitier needs at least {cfg.backbone.depth} clients "
                      f"(one per tier), got {cfg.federation.num_clients}")
    if cfg.method.depth < 1 or cfg.method.depth > 8:
        errors.append("method.depth out of range 1..8")
    try:
        cfg.partition_spec()
    except ValueError as e:
        errors.append(f"partition: {e}")
    return errors


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return build_config(apply_overrides(raw, list(overrides or [])))


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """The full effective config, defaults included, for echoing."""
    out = {k: getattr(cfg, k) for k in _SCALARS}
    out["out_dir"] = cfg.resolved_out_dir()
    for section in _SECTIONS:
        out[section] = dataclasses.asdict(getattr(cfg, section))
    out["partition"] = {"kind": cfg.partition_kind, "alpha": cfg.partition_alpha,
                       "seed": cfg.partition_seed}
    return out


def echo_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=True, default_flow_style=False)
