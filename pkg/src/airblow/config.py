"""Experiment configuration: nested YAML with a strict schema and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .jet import JetConfig
from .sim import StretchConfig, WorldConfig

POLICY_CELLS = {
    # name: (grasp policy, blow policy)
    "learned": ("learned", "learned"),
    "learned-fixed": ("learned", "fixed"),
    "heuristic-learned-blow": ("heuristic", "learned"),
    "heuristic": ("heuristic", "fixed"),
    "heuristic-random-blow": ("heuristic", "random"),
    "no-blow": ("heuristic", "none"),
}


class ConfigError(ValueError):
    pass


@dataclass
class EpisodeSection:
    max_grasp_steps: int = 5
    blows_per_grasp: int = 4
    resolution: int = 64
    coverage_resolution: int = 128
    cloth_grid: int = 11
    center_blow: bool = True


@dataclass
class GraspModelSection:
    widths: list = field(default_factory=lambda: [8, 16, 16, 16])
    rotations: int = 8


@dataclass
class BlowModelSection:
    channels: list = field(default_factory=lambda: [8, 8, 16, 16, 16, 32, 32])
    strides: list = field(default_factory=lambda: [2, 1, 2, 1, 2, 1, 2])
    action_hidden: int = 32
    fusion_hidden: int = 64
    candidates: int = 64


@dataclass
class TrainSection:
    # full-scale phase lengths: 300 epochs of pre-training per model, 200 of fine-tuning
    pretrain_grasp_epochs: int = 300
    pretrain_blow_epochs: int = 300
    finetune_epochs: int = 200
    episodes_per_epoch: int = 32
    optim_steps: int = 64
    grasp_batch: int = 16
    blow_batch: int = 128
    buffer_capacity: int = 30000
    lr: float = 1e-4
    weight_decay: float = 1e-6
    eps_start: float = 0.5
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5
    checkpoint_every: int = 10


@dataclass
class EvalSection:
    episodes: int = 50
    policies: list = field(default_factory=lambda: ["learned", "learned-fixed", "heuristic", "no-blow"])
    save_images: bool = False


@dataclass
class ExperimentConfig:
    task: str = "NormalRect"
    edge_scale: float = 1.0
    seed: int = 0
    out: str = "runs/default"
    parallel: int = 1
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    world: WorldConfig = field(default_factory=WorldConfig)
    jet: JetConfig = field(default_factory=JetConfig)
    stretch: StretchConfig = field(default_factory=StretchConfig)
    grasp_model: GraspModelSection = field(default_factory=GraspModelSection)
    blow_model: BlowModelSection = field(default_factory=BlowModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        from .env import TASKS
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")
        if self.edge_scale <= 0:
            raise ConfigError("edge_scale must be positive")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        for p in self.eval.policies:
            if p not in POLICY_CELLS:
                raise ConfigError(f"unknown policy cell {p!r}; expected one of {sorted(POLICY_CELLS)}")
        if self.episode.resolution % 16:
            raise ConfigError("episode.resolution must be a multiple of 16")
        if len(self.grasp_model.widths) != 4:
            raise ConfigError("grasp_model.widths needs four entries")
        if len(self.blow_model.channels) != 7 or len(self.blow_model.strides) != 7:
            raise ConfigError("blow_model needs seven channels and seven strides")
        if max(self.blow_model.channels) > 32:
            raise ConfigError("blow_model channels are capped at 32")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        """Hash of everything that affects results (output location and worker count excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("parallel")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _coerce(default, value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return type(default)(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(data or {})
