"""Experiment configuration: nested dataclasses loaded from YAML.

Unknown keys anywhere in the tree are rejected. Defaults follow the
reference setup where it is stated (10 devices, unit noise variance, 10 W
power budget, learning rate 0.001, 6000 samples per device) and use small
desk-scale values elsewhere.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "logistic"
    dim: int = 10
    num_classes: int = 10
    hidden: int = 16
    center: list[float] | None = None
    center_scale: float = 1.0
    init: str = "zeros"
    init_scale: float = 0.1


@dataclass
class DataConfig:
    source: str = "blobs"
    path: str | None = None
    test_path: str | None = None
    test_size: int = 1000
    separation: float = 2.0
    pool_factor: float = 1.0


@dataclass
class TrainConfig:
    eta: float = 0.001
    tau: int = 5
    batch_size: int = 32


@dataclass
class ScheduleConfig:
    strategy: str = "uniform"
    total_per_device: int | list[int] = 6000
    initial_per_device: int = 0
    matrix: list[list[int]] | None = None


@dataclass
class PartitionConfig:
    mode: str = "iid"
    gamma: float = 1.0


@dataclass
class ChannelConfig:
    error_free: bool = False
    policy: str = "full_inversion"
    sigma_z: float = 1.0
    p_max: float = 10.0
    lam: float | None = None


@dataclass
class CostConfigSection:
    T_slot: float = 1e-3
    L: int = 14
    cycles_per_sample: float = 1e4
    energy_coeff: float = 1e-28
    cpu_freq: float = 1e9
    include_downlink: bool = False


@dataclass
class AnalysisConfig:
    record_probes: bool = False
    probe_batches: int = 8
    probe_displacement: float = 0.1
    iid: bool = False
    f_star: float | None = None
    reference_steps: int = 500


@dataclass
class ExperimentConfig:
    algorithm: str = "fedavg"
    num_devices: int = 10
    rounds: int = 50
    seed: int = 0
    workers: int = 1
    eval_stride: int = 1
    target_loss: float | None = None
    output_dir: str | None = None
    figures: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    cost: CostConfigSection = field(default_factory=CostConfigSection)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.algorithm in ("fedavg", "fedsgd"), f"algorithm must be fedavg or fedsgd, got {self.algorithm!r}")
        need(self.num_devices >= 1, "num_devices must be >= 1")
        need(self.rounds >= 0, "rounds must be >= 0")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.eval_stride >= 1, "eval_stride must be >= 1")
        m = self.model
        need(m.kind in ("quadratic", "logistic", "mlp"), f"unknown model kind {m.kind!r}")
        need(m.init in ("zeros", "normal"), f"model.init must be zeros or normal, got {m.init!r}")
        if m.kind != "quadratic":
            need(m.dim >= 1 and m.num_classes >= 2, "classification models need dim >= 1 and num_classes >= 2")
        if m.kind == "mlp":
            need(m.hidden >= 1, "mlp needs hidden >= 1")
        if m.kind == "quadratic" and m.center is not None:
            need(len(m.center) >= 1, "quadratic center must be non-empty")
        need(self.data.source in ("blobs", "logistic", "file"), f"unknown data source {self.data.source!r}")
        if self.data.source == "file":
            need(self.data.path is not None, "data.path is required for file pools")
        need(self.data.pool_factor >= 1.0, "data.pool_factor must be >= 1")
        t = self.train
        need(t.eta >= 0, "train.eta must be nonnegative")
        need(t.tau >= 1 and t.batch_size >= 1, "train.tau and train.batch_size must be >= 1")
        s = self.schedule
        need(s.strategy in ("uniform", "front_loaded", "all_at_start", "explicit"),
             f"unknown schedule strategy {s.strategy!r}")
        if s.strategy == "explicit":
            need(s.matrix is not None, "explicit schedule needs schedule.matrix")
        totals = s.total_per_device if isinstance(s.total_per_device, list) else [s.total_per_device]
        need(all(v >= 0 for v in totals), "schedule totals must be nonnegative")
        if isinstance(s.total_per_device, list):
            need(len(s.total_per_device) == self.num_devices, "per-device totals must list every device")
        need(s.initial_per_device >= 0, "schedule.initial_per_device must be nonnegative")
        p = self.partition
        need(p.mode in ("iid", "dirichlet"), f"partition.mode must be iid or dirichlet, got {p.mode!r}")
        need(p.gamma > 0, "partition.gamma must be positive")
        c = self.channel
        need(c.policy in ("full_inversion", "fixed_lambda"), f"unknown power policy {c.policy!r}")
        need(c.sigma_z >= 0, "channel.sigma_z must be nonnegative")
        need(c.p_max > 0, "channel.p_max must be positive")
        if c.policy == "fixed_lambda" and not c.error_free:
            need(c.lam is not None and c.lam > 0, "fixed_lambda needs a positive channel.lam")
        k = self.cost
        need(k.T_slot > 0 and k.L >= 1, "cost.T_slot must be > 0 and cost.L >= 1")
        need(min(k.cycles_per_sample, k.energy_coeff, k.cpu_freq) > 0, "hardware constants must be positive")
        need(self.analysis.probe_batches >= 0, "analysis.probe_batches must be >= 0")
        need(self.analysis.probe_displacement > 0, "analysis.probe_displacement must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with ``section.key`` style overrides, e.g. ``replace(**{"train.eta": 0.1})``."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            *parents, leaf = key.split(".")
            for part in parents:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {part!r} in {key!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = copy.deepcopy(value)
        return from_dict(data)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory if known[name].default_factory is not dataclasses.MISSING else None
        if default is not None and dataclasses.is_dataclass(default):
            kwargs[name] = _build(default, value or {}, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Parse a YAML config file; returns the config and the raw text for echoing."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return from_dict(data or {}), text
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
