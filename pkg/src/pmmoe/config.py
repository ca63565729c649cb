"""Experiment configuration: one flat YAML mapping, every key optional."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from pmmoe.datagen import PartitionSpec
from pmmoe.errors import ConfigError, PMMoEError
from pmmoe.moe import MoEConfig, default_k
from pmmoe.splitmodel import SplitConfig


@dataclass
class ExperimentConfig:
    seed: int = field(default=0, metadata={"doc": "master seed for data, partition, inits and batching"})
    # data
    dataset: str = field(default="synthetic", metadata={"doc": "synthetic or idx"})
    C: int = field(default=10, metadata={"doc": "synthetic: number of classes"})
    U: int = field(default=20, metadata={"doc": "synthetic: input dimension"})
    per_class: int = field(default=200, metadata={"doc": "synthetic: samples per class"})
    spread: float = field(default=1.5, metadata={"doc": "synthetic: noise scale around each class mean"})
    idx_images: str | None = field(default=None, metadata={"doc": "idx: path to the image file"})
    idx_labels: str | None = field(default=None, metadata={"doc": "idx: path to the label file"})
    # partition
    M: int = field(default=8, metadata={"doc": "number of clients"})
    S: float = field(default=0.0, metadata={"doc": "shared ratio in percent, split evenly before the Dirichlet draw"})
    beta: float = field(default=0.1, metadata={"doc": "Dirichlet concentration"})
    min_size: int = field(default=10, metadata={"doc": "redraw the partition until every client has this many samples"})
    train_fraction: float = field(default=0.75, metadata={"doc": "per-client train share, stratified by class"})
    # model split
    D: int = field(default=16, metadata={"doc": "feature width"})
    fe_hidden: int = field(default=32, metadata={"doc": "hidden width of the feature extractors"})
    enable_fp: bool = field(default=True, metadata={"doc": "personal feature extractor"})
    enable_sp: bool = field(default=True, metadata={"doc": "personal head"})
    enable_pp: bool = field(default=True, metadata={"doc": "personal parameter vector"})
    pp_on_logits: bool = field(default=False, metadata={"doc": "add the personal vector to the logits (needs D == C)"})
    # pre-training
    E_g: int = field(default=200, metadata={"doc": "global rounds"})
    E_l: int = field(default=1, metadata={"doc": "local epochs per round"})
    lr: float = field(default=0.05, metadata={"doc": "local SGD step size"})
    batch_size: int = field(default=16, metadata={"doc": "mini-batch size in both phases"})
    # fine-tuning
    k: int | None = field(default=None, metadata={"doc": "top-k per gate; empty means M//2 when S == 0, else M"})
    eta_moe: float = field(default=0.5, metadata={"doc": "gate SGD step size"})
    E_moe: int = field(default=50, metadata={"doc": "gate training epochs"})
    gamma: float = field(default=0.2, metadata={"doc": "share of foreign experts dropped by the energy score"})
    T: float = field(default=1.0, metadata={"doc": "energy temperature"})
    gate_hidden: list[int] = field(default_factory=lambda: [128, 256, 128], metadata={"doc": "gate hidden widths"})
    gate_activation: str = field(default="leaky_relu", metadata={"doc": "relu or leaky_relu"})
    gate_init: str = field(default="orthogonal", metadata={"doc": "orthogonal or uniform"})
    fallback: bool = field(default=True, metadata={"doc": "keep the local model when trained gates do not lower training loss"})
    noise_experts: int = field(default=0, metadata={"doc": "random-parameter entries planted in the pool"})
    # theorem check
    theorem_trials: int = field(default=100_000, metadata={"doc": "Monte Carlo trials per grid point"})
    # runtime
    out: str = field(default="runs/default", metadata={"doc": "output directory"})
    workers: int = field(default=1, metadata={"doc": "thread pool size for client work"})

    def __post_init__(self):
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("dataset 'idx' needs idx_images and idx_labels")
        for name in ("C", "U", "per_class", "M", "D", "E_g", "fe_hidden", "E_l", "batch_size", "workers", "theorem_trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("E_moe", "min_size", "noise_experts"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        try:
            self.partition_spec()
            self.split_config()
            self.moe_config()
        except PMMoEError as e:
            raise ConfigError(str(e)) from e
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(M=self.M, S=self.S, beta=self.beta, seed=self.seed, min_size=self.min_size)

    def split_config(self, U: int | None = None, C: int | None = None) -> SplitConfig:
        return SplitConfig(
            self.U if U is None else U,
            self.D,
            self.C if C is None else C,
            enable_fp=self.enable_fp,
            enable_sp=self.enable_sp,
            enable_pp=self.enable_pp,
            fe_hidden=self.fe_hidden,
            pp_on_logits=self.pp_on_logits,
        )

    @property
    def top_k(self) -> int:
        return default_k(self.M, self.S) if self.k is None else self.k

    def moe_config(self) -> MoEConfig:
        return MoEConfig(
            k=self.top_k,
            lr=self.eta_moe,
            epochs=self.E_moe,
            gamma=self.gamma,
            T=self.T,
            batch_size=self.batch_size,
            gate_hidden=tuple(self.gate_hidden),
            gate_activation=self.gate_activation,
            gate_init=self.gate_init,
            fallback=self.fallback,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_mapping({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    """Light type checks; YAML already yields ints, floats, bools and lists."""
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    if value is None:
        if name in ("k", "idx_images", "idx_labels"):
            return None
        raise ConfigError(f"{name} cannot be empty")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) or name == "k":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


def from_mapping(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(map(str, unknown))}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    return from_mapping(raw)


def defaults_text() -> str:
    """The default configuration as commented YAML."""
    lines = []
    for name, value in ExperimentConfig().to_dict().items():
        rendered = yaml.safe_dump({name: value}, default_flow_style=True, width=1000).strip()[1:-1]
        lines.append(f"{rendered:<30} # {_FIELDS[name].metadata['doc']}")
    return "\n".join(lines) + "\n"
