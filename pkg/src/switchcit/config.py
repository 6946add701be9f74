"""Experiment configuration: nested YAML file merged with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from switchcit.lora import AdapterConfig
from switchcit.switchnet import SwitchTrainConfig
from switchcit.tasks import BUILTIN_TASKS, DEFAULT_ORDER
from switchcit.tinylm.train import TrainConfig

STRATEGIES = ("switchcit", "rehearsal", "seq_peft")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TasksConfig:
    order: tuple[str, ...] = DEFAULT_ORDER
    train_size: int = 2000
    test_size: int = 200

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        unknown = [t for t in self.order if t not in BUILTIN_TASKS]
        if unknown:
            raise ConfigError(f"unknown task(s) {unknown}; available: {sorted(BUILTIN_TASKS)}")
        if len(set(self.order)) != len(self.order):
            raise ConfigError("task order contains duplicates")
        if not self.order:
            raise ConfigError("task order is empty")


@dataclass(frozen=True)
class ArchConfig:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 128


@dataclass(frozen=True)
class PretrainConfig:
    corpus_lines: int = 20000
    skill_fraction: float = 0.8
    preamble_fraction: float = 0.3
    pack_len: int = 80
    extractor_corpus_lines: int = 10000
    extractor_layout: str = "prompt"
    base: TrainConfig = TrainConfig(
        learning_rate=5e-3, epochs=25, batch_size=16, schedule="cosine", warmup_steps=200
    )
    # one short pass: longer training specializes the last-token state to
    # next-token prediction and washes out the instruction identity
    extractor: TrainConfig = TrainConfig(
        learning_rate=5e-3, epochs=1, batch_size=16, schedule="cosine", warmup_steps=100
    )

    def __post_init__(self):
        if self.extractor_layout not in ("plain", "prompt"):
            raise ConfigError(f"pretrain.extractor_layout must be 'plain' or 'prompt', not {self.extractor_layout!r}")


@dataclass(frozen=True)
class RunSection:
    strategy: str = "switchcit"
    retention: float = 0.01
    oracle_routing: bool = False
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"invalid strategy {self.strategy!r}; valid strategies: {', '.join(STRATEGIES)}")
        if not 0 < self.retention <= 1:
            raise ConfigError(f"retention must be in (0, 1], got {self.retention}")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    model_dir: str = "models"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    tasks: TasksConfig = TasksConfig()
    model: ArchConfig = ArchConfig()
    extractor: ArchConfig = ArchConfig(dim=32, n_layers=2, n_heads=2)
    pretrain: PretrainConfig = PretrainConfig()
    adapter: AdapterConfig = AdapterConfig()
    train: TrainConfig = TrainConfig(learning_rate=1e-2, epochs=3, batch_size=32)
    switch: SwitchTrainConfig = SwitchTrainConfig(epochs=50)
    run: RunSection = RunSection()
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(default, data: Mapping[str, Any], where: str):
    """Overlay ``data`` onto a (possibly nested) dataclass instance; unknown keys are errors."""
    label = where or "config"
    if not isinstance(data, Mapping):
        raise ConfigError(f"{label}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {label}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _merge(current, value, key)
        else:
            kwargs[name] = _coerce(value, current, key)
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from None


def _coerce(value, current, key):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if current is None and isinstance(value, (int, float)) and not isinstance(value, bool):
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def config_from_dict(data: Mapping[str, Any] | None) -> ExperimentConfig:
    return _merge(ExperimentConfig(), data or {}, "")


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read YAML (or defaults when ``path`` is None) and apply dotted-key overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded or {}
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {dotted}: {p} is not a section")
            node = nxt
        node[leaf] = value
    return config_from_dict(data)
