"""Experiment configuration: one JSON document per experiment, strict keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from compecon.economics import CostConfig
from compecon.model import ModelConfig
from compecon.training import TrainConfig

KINDS = ("budget_sweep", "lambda_sweep", "ablation", "single_run")
TASK_KINDS = ("copy", "classify", "char")

DEFAULT_SWEEPS = {
    "budget_sweep": [64, 32, 16, 8, 4],
    "lambda_sweep": [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
    "ablation": [1e-4],
    "single_run": [0.0],
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    seq_len: int = 64
    vocab: int = 64
    num_salient: int = 4
    n_examples: int = 8000
    corpus_path: str = ""
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "single_run"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=1, eval_interval=50))
    task: TaskSpec = field(default_factory=TaskSpec)
    sweep_values: tuple[float, ...] = ()
    posthoc_k_values: tuple[int, ...] = (32, 16, 8, 4)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/out"
    checkpoint: str = ""
    eval_split: str = "val"
    eval_max_examples: int = 200
    measure_latency: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        vals = tuple(self.sweep_values) or tuple(DEFAULT_SWEEPS[self.kind])
        object.__setattr__(self, "sweep_values", vals)
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "posthoc_k_values", tuple(self.posthoc_k_values))
        diffs = [b - a for a, b in zip(vals, vals[1:])]
        if not (all(d > 0 for d in diffs) or all(d < 0 for d in diffs)):
            raise ConfigError(f"sweep_values must be strictly monotone, got {list(vals)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"eval_split must be train/val/test, got {self.eval_split!r}")
        if self.kind == "budget_sweep" and any(int(v) != v or v < 1 for v in vals):
            raise ConfigError("budget_sweep values must be integers >= 1")
        if self.kind in ("lambda_sweep", "ablation") and any(v < 0 for v in vals):
            raise ConfigError("lambda values must be >= 0")

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=(seed,))
        if out is not None:
            cfg = replace(cfg, output_dir=out)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sweep_values"] = list(self.sweep_values)
        d["seeds"] = list(self.seeds)
        d["posthoc_k_values"] = list(self.posthoc_k_values)
        d["task"]["split_fractions"] = list(self.task.split_fractions)
        return d


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return data


def _build(cls, data, where):
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(_strict(ExperimentConfig, data, "config"))
    if "model" in data:
        data["model"] = _build(ModelConfig, _strict(ModelConfig, data["model"], "model"), "model")
    if "train" in data:
        tr = dict(_strict(TrainConfig, data["train"], "train"))
        if "cost" in tr:
            tr["cost"] = _build(CostConfig, _strict(CostConfig, tr["cost"], "train.cost"), "train.cost")
        base = ExperimentConfig().train
        data["train"] = _build(TrainConfig, {**asdict(base), "cost": base.cost, **tr}, "train")
    if "task" in data:
        data["task"] = _build(TaskSpec, _strict(TaskSpec, data["task"], "task"), "task")
    return _build(ExperimentConfig, data, "config")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
