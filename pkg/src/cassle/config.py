"""Run configuration: dataclass tree, JSON parsing with field-path errors, serialization."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .distill import FAMILIES, METHOD_FAMILY
from .errors import ConfigError, ParseError
from .evaluation import ProbeConfig
from .losses import LossConfig
from .nn import ArchSpec
from .optim import OptimizerConfig
from .scenarios import AugmentPolicy, ScenarioSpec

STRATEGIES = ("finetune", "cassle", "ewc", "cassle_swap", "cassle_nopred")


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    use_run_seed: bool = True

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar100"):
            raise ConfigError(f"unknown source {self.source!r}", field="data.source")
        if self.source == "cifar100" and not self.path:
            raise ConfigError("cifar100 source needs a path", field="data.path")


@dataclass
class TrainConfig:
    steps_per_task: int = 2000
    batch_size: int = 128
    ema_momentum: float = 0.99
    reinit_predictor: bool = True
    ewc_lambda: float = 100.0
    fisher_batches: int = 16
    log_every: int = 10
    distill_family: str | None = None

    def __post_init__(self):
        if int(self.steps_per_task) < 0:
            raise ConfigError("must be >= 0", field="training.steps_per_task")
        if int(self.batch_size) < 2:
            raise ConfigError("must be >= 2", field="training.batch_size")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="training.ema_momentum")
        if self.ewc_lambda < 0:
            raise ConfigError("must be >= 0", field="training.ewc_lambda")
        if int(self.fisher_batches) < 1:
            raise ConfigError("must be >= 1", field="training.fisher_batches")
        if int(self.log_every) < 1:
            raise ConfigError("must be >= 1", field="training.log_every")
        if self.distill_family is not None and self.distill_family not in FAMILIES:
            raise ConfigError(f"unknown family {self.distill_family!r}", field="training.distill_family")


@dataclass
class EvalConfig:
    test_fraction: float = 0.2
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    knn: bool = True
    knn_k: int = 20
    knn_tau: float = 0.07

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("must lie in (0, 1)", field="eval.test_fraction")
        if int(self.knn_k) < 1:
            raise ConfigError("must be >= 1", field="eval.knn_k")
        if not self.knn_tau > 0:
            raise ConfigError("must be positive", field="eval.knn_tau")


@dataclass
class RunConfig:
    method: str = "simclr"
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    seed: int = 0
    strategy: str = "cassle"
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.method not in METHOD_FAMILY:
            raise ConfigError(f"unknown method {self.method!r}", field="method")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}", field="strategy")
        if self.arch.input_dim != self.data.synthetic.input_dim and self.data.source == "synthetic":
            raise ConfigError("arch.input_dim must equal data.synthetic.input_dim", field="arch.input_dim")

    def replace(self, **changes) -> "RunConfig":
        return config_from_dict({**config_to_dict(self), **changes})


def _check_scalar(value, hint, path: str):
    """Validate a JSON scalar or list against a field annotation."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError("expected a list", field=path)
        (item,) = typing.get_args(hint)
        return [_check_scalar(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected a boolean", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", field=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", field=path)
        return value
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", field=path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("unknown key", field=f"{path}.{unknown[0]}" if path else unknown[0])
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _check_scalar(value, hint, sub)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Build a validated :class:`RunConfig`, filling defaults.

    ``scenario`` may be given as a bare regime name (``"class"``, ``"data"``,
    ``"domain"``). Domain-incremental runs default to three synthetic domains.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", field="<root>")
    data = json.loads(json.dumps(data))  # deep copy of plain JSON values
    if isinstance(data.get("scenario"), str):
        data["scenario"] = {"regime": data["scenario"]}
    scenario = data.get("scenario") or {}
    regime = scenario.get("regime") if isinstance(scenario, dict) else None
    if regime in ("domain", "domain_inc"):
        synth = data.setdefault("data", {}).setdefault("synthetic", {})
        if isinstance(synth, dict) and "n_domains" not in synth:
            synth["n_domains"] = int(scenario.get("tasks", 3))
            scenario.setdefault("tasks", synth["n_domains"])
    try:
        return _build(RunConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc), field="<root>") from None


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field="<file>") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return config_from_dict(data)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
