"""Run configuration: model, curriculum, optimiser and corpus settings in one JSON file."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .curriculum import ExpansionSchedule, Stage
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 512
    frames: int = 16
    frame_size: int = 32
    n_test: int = 128


def default_schedule() -> ExpansionSchedule:
    """Two-stage hybrid-sparse curriculum: 4 frames, then 8 frames with a lower keep rate."""
    common = dict(k_local=1, k_random=3, block_size=56, q_m=0.5, batch=32)
    return ExpansionSchedule((
        Stage(4, q_v=0.7, epochs=50, lr=2e-4, **common),
        Stage(8, q_v=0.6, epochs=100, lr=2e-4, **common),
    ))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ExpansionSchedule = field(default_factory=default_schedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(),
                "schedule": [asdict(s) for s in self.schedule.stages],
                "train": asdict(self.train), "data": asdict(self.data)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "schedule", "train", "data"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        base = cls()
        model = ModelConfig.from_dict({**base.model.to_dict(), **d.get("model", {})})
        schedule = (ExpansionSchedule(tuple(Stage(**s) for s in d["schedule"]))
                    if "schedule" in d else base.schedule)
        train = _build(TrainConfig, d.get("train", {}))
        data = _build(DataConfig, d.get("data", {}))
        return cls(model, schedule, train, data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(kind, values: dict):
    names = {f.name for f in fields(kind)}
    bad = set(values) - names
    if bad:
        raise ValueError(f"unknown {kind.__name__} fields {sorted(bad)}")
    return kind(**values)
