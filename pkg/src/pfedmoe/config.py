"""Experiment configuration: a TOML file with five tables.

::

    seed = 0

    [dataset]        # kind = "synthetic" | "cifar10"
    [partition]      # kind = "pathological" | "practical"
    [federation]     # algorithm, clients, rounds, learning rates
    [model]          # assignment rule, shared extractor, gate width
    [output]         # logging cadence, accuracy targets

Unknown tables or keys are rejected. :func:`echo` writes the fully resolved
configuration back in the same format.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import PartitionSpec, Pathological, Practical
from .fed import ConfigError, FederationConfig
from .models import min_input_size


class ConfigSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line, self.column = line, column


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    paths: list[str] = field(default_factory=list)
    max_samples: int = 0
    num_classes: int = 4
    image_size: int = 16
    channels: int = 3
    samples_per_class: int = 100
    class_separation: float = 8.0
    noise: float = 1.0
    mean_grid: int = 4

    def validate(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError("dataset.kind", "must be 'synthetic' or 'cifar10'")
        if self.kind == "cifar10" and not self.paths:
            raise ConfigError("dataset.paths", "cifar10 needs at least one binary batch file")
        if self.max_samples < 0:
            raise ConfigError("dataset.max_samples", "must be >= 0 (0 keeps everything)")
        if self.kind == "synthetic":
            if self.num_classes < 2:
                raise ConfigError("dataset.num_classes", "must be >= 2")
            if self.image_size < min_input_size():
                raise ConfigError("dataset.image_size", f"must be >= {min_input_size()}")
            if self.channels < 1:
                raise ConfigError("dataset.channels", "must be >= 1")
            if self.samples_per_class < 1:
                raise ConfigError("dataset.samples_per_class", "must be >= 1")
            if not self.noise > 0:
                raise ConfigError("dataset.noise", "must be > 0")
            if self.mean_grid < 0:
                raise ConfigError("dataset.mean_grid", "must be >= 0 (0 draws every pixel independently)")

    @property
    def classes(self) -> int:
        return 10 if self.kind == "cifar10" else self.num_classes

    @property
    def dims(self) -> tuple[int, int, int]:
        if self.kind == "cifar10":
            return (3, 32, 32)
        return (self.channels, self.image_size, self.image_size)


@dataclass
class PartitionConfig:
    kind: str = "pathological"
    classes_per_client: int = 2
    beta: float = 0.5
    gamma: float = 0.5

    def validate(self, num_classes: int):
        if self.kind not in ("pathological", "practical"):
            raise ConfigError("partition.kind", "must be 'pathological' or 'practical'")
        if not 1 <= self.classes_per_client <= num_classes:
            raise ConfigError("partition.classes_per_client", f"k must be in [1, {num_classes}]")
        if not self.beta > 0:
            raise ConfigError("partition.beta", "beta > 0")
        if not self.gamma > 0:
            raise ConfigError("partition.gamma", "gamma > 0")

    def spec(self, num_clients: int, seed: int) -> PartitionSpec:
        if self.kind == "pathological":
            return PartitionSpec(Pathological(self.classes_per_client, self.beta), num_clients, seed)
        return PartitionSpec(Practical(self.gamma), num_clients, seed)


@dataclass
class FederationBlock:
    algorithm: str = "pfedmoe"
    num_clients: int = 10
    participation: float = 1.0
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 64
    lr_theta: float = 0.01
    lr_omega: float | None = None
    lr_phi: float = 0.01


@dataclass
class ModelConfig:
    assignment: str = "mod5"
    global_model: str = "cnn5"
    gate_hidden: int = 64


@dataclass
class OutputConfig:
    gate_log_every: int = 0
    representations: bool = True
    checkpoint_every: int = 0
    targets: list[float] = field(default_factory=lambda: [50.0, 90.0])
    mean: str = "unweighted"

    def validate(self):
        if self.gate_log_every < 0:
            raise ConfigError("output.gate_log_every", "must be >= 0 (0 logs the final round only)")
        if self.checkpoint_every < 0:
            raise ConfigError("output.checkpoint_every", "must be >= 0")
        if self.mean not in ("unweighted", "weighted"):
            raise ConfigError("output.mean", "must be 'unweighted' or 'weighted'")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationBlock = field(default_factory=FederationBlock)
    model: ModelConfig = field(default_factory=ModelConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.federation.lr_omega is None:
            self.federation.lr_omega = self.federation.lr_theta
        self.validate()

    def validate(self):
        self.dataset.validate()
        self.partition.validate(self.dataset.classes)
        self.output.validate()
        try:
            self.federation_config()
        except ConfigError as e:
            block = "model" if e.field in ("assignment", "global_model", "gate_hidden") else "federation"
            raise ConfigError(f"{block}.{e.field}", str(e).split(": ", 1)[1]) from None

    def federation_config(self) -> FederationConfig:
        f, m = self.federation, self.model
        return FederationConfig(
            num_clients=f.num_clients, participation=f.participation, rounds=f.rounds,
            local_epochs=f.local_epochs, batch_size=f.batch_size, lr_theta=f.lr_theta,
            lr_omega=f.lr_omega, lr_phi=f.lr_phi, algorithm=f.algorithm,
            assignment=m.assignment, global_model=m.global_model, gate_hidden=m.gate_hidden,
            seed=self.seed,
        )

    def partition_spec(self) -> PartitionSpec:
        return self.partition.spec(self.federation.num_clients, self.seed)


BLOCKS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "federation": FederationBlock,
    "model": ModelConfig,
    "output": OutputConfig,
}


def _coerce(where: str, f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(where, "expected true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, "expected an integer")
        return value
    if kind.startswith("float"):
        if value is None and "None" in kind:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, "expected a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(where, "expected a string")
        return value
    if kind == "list[str]":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(where, "expected a list of strings")
        return list(value)
    if kind == "list[float]":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(where, "expected a list of numbers")
        return [float(v) for v in value]
    raise AssertionError(f"unhandled field type {kind}")


def from_dict(doc: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError("seed", "expected an integer")
            kwargs["seed"] = value
            continue
        if key not in BLOCKS:
            raise ConfigError(key, "unknown key")
        if not isinstance(value, dict):
            raise ConfigError(key, "expected a table")
        cls = BLOCKS[key]
        known = {f.name: f for f in fields(cls)}
        block = {}
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"{key}.{k}", "unknown key")
            block[k] = _coerce(f"{key}.{k}", known[k], v)
        kwargs[key] = cls(**block)
    return ExperimentConfig(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        line = getattr(e, "lineno", None)
        col = getattr(e, "colno", None)
        if line is None:
            import re
            m = re.search(r"line (\d+), column (\d+)", str(e))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        raise ConfigSyntaxError(f"syntax error at line {line}, column {col}: {e}", line, col) from None
    return from_dict(doc)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__}")


def echo(cfg: ExperimentConfig) -> str:
    """Resolved configuration as TOML; ``parse_config(echo(cfg)) == cfg``."""
    lines = [f"seed = {cfg.seed}"]
    for name in BLOCKS:
        lines.append("")
        lines.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_toml_value(getattr(getattr(cfg, name), f.name))}")
    return "\n".join(lines) + "\n"
