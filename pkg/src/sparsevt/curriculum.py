"""Temporal sparse expansion: multi-stage schedules and checkpoint expansion.

Consecutive stages must strictly increase the clip length, strictly decrease
the visual keep rate and strictly decrease ``(K_l + K_r) / T``; the edge
parameters themselves stay fixed across stages.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .costmodel import CostDims, model_dims, sparsity_fraction, with_frames
from .model import ModelConfig, SparsityConfig, interpolate_pos_embed, interpolate_rel_pos_bias

# violation identifiers
CLIP_LENGTH = "clip-length-increasing"
KEEP_RATE = "keep-rate-decreasing"
EDGE_RATIO = "edge-ratio-decreasing"
EDGE_PARAMS = "edge-params-constant"


@dataclass(frozen=True)
class Stage:
    frames: int
    q_v: float = 1.0
    q_m: float = 1.0
    k_local: int | None = None
    k_random: int = 0
    block_size: int = 56
    epochs: int = 1
    lr: float = 1e-3
    batch: int = 32

    @property
    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(self.k_local, self.k_random, self.block_size, self.q_v, self.q_m)

    def edge_ratio(self) -> Fraction | None:
        if self.k_local is None:
            return None
        return Fraction(self.k_local + self.k_random, self.frames)


@dataclass(frozen=True)
class Violation:
    constraint: str
    stages: tuple[int, int]
    detail: str

    def to_dict(self) -> dict:
        return {"constraint": self.constraint, "stages": list(self.stages), "detail": self.detail}


@dataclass(frozen=True)
class ExpansionSchedule:
    stages: tuple[Stage, ...]

    @classmethod
    def from_json(cls, text: str) -> "ExpansionSchedule":
        data = json.loads(text)
        if isinstance(data, dict):
            data = data["stages"]
        return cls(tuple(Stage(**s) for s in data))

    @classmethod
    def load(cls, path) -> "ExpansionSchedule":
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps([asdict(s) for s in self.stages], indent=2)


def validate_schedule(schedule: ExpansionSchedule | list[Stage]) -> list[Violation]:
    """Every violated chain inequality between adjacent stages; empty means valid."""
    stages = list(schedule.stages if isinstance(schedule, ExpansionSchedule) else schedule)
    if not stages:
        raise ValueError("schedule has no stages")
    out = []
    for i, (a, b) in enumerate(zip(stages, stages[1:])):
        pair = (i, i + 1)
        if not a.frames < b.frames:
            out.append(Violation(CLIP_LENGTH, pair, f"T {a.frames} -> {b.frames}"))
        if not a.q_v > b.q_v:
            out.append(Violation(KEEP_RATE, pair, f"q_v {a.q_v} -> {b.q_v}"))
        if (a.k_local, a.k_random, a.block_size) != (b.k_local, b.k_random, b.block_size):
            out.append(Violation(EDGE_PARAMS, pair,
                                 f"(K_l,K_r,G) {(a.k_local, a.k_random, a.block_size)} -> "
                                 f"{(b.k_local, b.k_random, b.block_size)}"))
        ra, rb = a.edge_ratio(), b.edge_ratio()
        if ra is None or rb is None or not ra > rb:
            out.append(Violation(EDGE_RATIO, pair, f"(K_l+K_r)/T {ra} -> {rb}"))
    return out


def compute_stage_sparsity(stage: Stage, dims: CostDims, mode: str = "formula", seed=0) -> float:
    """Overall edge sparsity S of ``stage`` at ``dims`` (frames taken from the stage)."""
    return float(sparsity_fraction(stage.sparsity, with_frames(dims, stage.frames), mode, seed))


def expand_checkpoint(ckpt: Checkpoint, frames: int, sparsity: SparsityConfig | None = None,
                      meta: dict | None = None) -> Checkpoint:
    """Re-target a checkpoint to a longer clip.

    The absolute position table and every relative-bias table are resized
    along time by nearest-neighbour interpolation; all other tensors are copied
    unchanged. Optimizer moments are dropped since the next stage starts a
    fresh optimizer.
    """
    cfg = ckpt.config
    t1 = cfg.frames
    if frames <= t1:
        raise ValueError(f"expansion needs more frames: {t1} -> {frames}")
    new_cfg = replace(cfg, frames=frames, sparsity=sparsity or cfg.sparsity)
    tensors = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt."):
            continue
        if name == "vis.pos":
            tensors[name] = interpolate_pos_embed(arr, t1, frames)
        elif name.endswith(".relpos"):
            tensors[name] = interpolate_rel_pos_bias(arr, t1, frames)
        else:
            tensors[name] = np.array(arr, copy=True)
    new_meta = dict(ckpt.meta)
    new_meta.update({"frames": frames, "expanded_from": t1,
                     "stage": int(ckpt.meta.get("stage", 0)) + 1})
    new_meta.update(meta or {})
    return Checkpoint(new_cfg, tensors, new_meta)


def stage_config(base: ModelConfig, stage: Stage) -> ModelConfig:
    return replace(base, frames=stage.frames, sparsity=stage.sparsity)


BASE_SCHEDULE = ExpansionSchedule((
    Stage(4, q_v=0.7, q_m=0.1, k_local=1, k_random=3, block_size=56),
    Stage(8, q_v=0.6, q_m=0.1, k_local=1, k_random=3, block_size=56),
    Stage(16, q_v=0.5, q_m=0.1, k_local=1, k_random=3, block_size=56),
))


def schedule_sparsities(schedule: ExpansionSchedule, dims: CostDims) -> list[float]:
    return [compute_stage_sparsity(s, dims) for s in schedule.stages]


__all__ = ["Stage", "Violation", "ExpansionSchedule", "validate_schedule",
           "compute_stage_sparsity", "expand_checkpoint", "stage_config", "BASE_SCHEDULE",
           "schedule_sparsities", "model_dims", "CLIP_LENGTH", "KEEP_RATE", "EDGE_RATIO",
           "EDGE_PARAMS"]
