"""Experiment configuration.

Config files are JSON objects with optional sections ``train``, ``eval``,
``pu`` and ``synth``; every key is optional and falls back to the defaults
below. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .locmetrics import EvalConfig


@dataclass
class TrainConfig:
    beta: float = 0.1
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 6
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    channels: int = 8
    n_layers: int = 3
    aga_enabled: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_epochs)


@dataclass
class PUConfig:
    enabled: bool = False
    delta: float = 0.1
    gamma: float = 0.01
    patience: int = 2
    max_iterations: int = 4
    retrain_epochs: int = 4
    retrain_lr: float = 0.001


@dataclass
class SynthConfig:
    n_scenes: int = 250
    # extra annotated scenes outside the 80/10/10 split, used only for localization
    n_heldout: int = 0
    image_size: int = 48
    grid: int = 3
    observations: tuple[str, ...] = ("opacity", "nodule", "effusion", "pneumothorax")
    prevalence: float = 0.35
    multi_region_rate: float = 0.0
    lesion_intensity: tuple[float, float] = (0.5, 0.9)
    lesion_size: tuple[int, int] = (5, 9)
    noise: float = 0.05
    # probability that a truly present P cell is reported as U; scalar or per observation
    dropout: float | tuple[float, ...] = 0.0
    # if set, overrides dropout so the unlabeled pool has this positive fraction
    target_alpha: float | tuple[float, ...] | None = None
    negative_mention_rate: float = 0.6
    shortcut_rate: float = 0.0

    def __post_init__(self):
        self.observations = tuple(self.observations)
        self.lesion_intensity = tuple(self.lesion_intensity)
        self.lesion_size = tuple(int(v) for v in self.lesion_size)
        for name in ("dropout", "target_alpha"):
            v = getattr(self, name)
            if isinstance(v, list):
                setattr(self, name, tuple(v))
        for d in self.per_observation(self.dropout):
            if not 0.0 <= d < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")
        region = self.image_size // self.grid
        if self.lesion_size[1] > region - 2:
            raise ValueError(f"lesions up to {self.lesion_size[1]} px do not fit {region} px regions")

    def per_observation(self, value) -> tuple[float, ...]:
        if value is None:
            return (None,) * len(self.observations)
        if isinstance(value, (int, float)):
            return (float(value),) * len(self.observations)
        if len(value) != len(self.observations):
            raise ValueError("per-observation setting has the wrong length")
        return tuple(float(v) for v in value)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pu: PUConfig = field(default_factory=PUConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    beta_sweep: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {"train": TrainConfig, "eval": EvalConfig, "pu": PUConfig, "synth": SynthConfig}
        unknown = set(raw) - set(sections) - {"seeds", "beta_sweep"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            body = raw.get(name, {})
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(body) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**body)
        for key in ("seeds", "beta_sweep"):
            if key in raw:
                kwargs[key] = tuple(raw[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields of some sections overridden, e.g. replace(train={"beta": 0})."""
        out = {}
        for name in ("train", "eval", "pu", "synth"):
            out[name] = dataclasses.replace(getattr(self, name), **sections.pop(name, {}))
        return dataclasses.replace(self, **out, **sections)
