"""Analytic edge, FLOP and activation-memory accounting.

Two counting modes are offered for visual self-attention edges:

* ``"formula"`` uses the closed form ``N (K_l + K_r) G`` per layer (``N`` counts
  the class token), capped at the dense ``N^2``;
* ``"exact"`` instantiates a seeded :class:`~sparsevt.topology.EdgeSet` per
  layer and counts its edges (boundary clipping and padding accounted for).

Multimodal layers contribute ``N_m * N_t`` edges (visual keys times text
queries). Live token counts follow ``N <- ceil(q N)`` at every prune site; a
pruned layer is charged in full at the token count entering it, so a drop
takes effect from the next layer on.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .model import ModelConfig, SparsityConfig
from .pruning import keep_count
from .topology import build_edge_set, count_edges

FLOPS_PER_MAC = 2
SOFTMAX_FLOPS = 5
BYTES_PER_ELEMENT = 4
# f32 activations kept per token per layer for backward, in units of d
ACTIVATIONS_PER_TOKEN = 16


@dataclass(frozen=True)
class CostDims:
    frames: int
    grid_hw: int               # spatial tokens per frame (H' * W')
    dim: int
    heads: int
    visual_depth: int
    multimodal_depth: int
    text_len: int              # N_t, text queries seen by cross-attention
    prune_layers: tuple[int, ...]
    patch: int = 16
    channels: int = 3
    mlp_ratio: int = 4

    @property
    def n_regional(self) -> int:
        return self.frames * self.grid_hw


def base_dims(frames: int = 4) -> CostDims:
    """Base-size ViT/BERT dimensions: 224px frames, 16px patches, 12+3 layers."""
    return CostDims(frames=frames, grid_hw=14 * 14, dim=768, heads=12, visual_depth=12,
                    multimodal_depth=3, text_len=32, prune_layers=(4, 7, 10))


def model_dims(cfg: ModelConfig) -> CostDims:
    t, h, w = cfg.grid
    return CostDims(frames=t, grid_hw=h * w, dim=cfg.dim, heads=cfg.heads,
                    visual_depth=cfg.visual_depth, multimodal_depth=cfg.multimodal_depth,
                    text_len=cfg.text_len, prune_layers=tuple(cfg.prune_layers),
                    patch=cfg.patch, channels=cfg.channels, mlp_ratio=cfg.mlp_ratio)


@dataclass
class LayerTokens:
    """Regional token counts (class token excluded) entering each layer."""
    visual: list[int]
    multimodal: list[int]


def token_counts(sp: SparsityConfig, dims: CostDims) -> LayerTokens:
    n = dims.n_regional
    vis = []
    for l in range(1, dims.visual_depth + 1):
        vis.append(n)
        if sp.q_v < 1 and l in dims.prune_layers:
            n = keep_count(n, sp.q_v)
    mm = []
    for l in range(1, dims.multimodal_depth + 1):
        mm.append(n)
        if l == 1 and sp.q_m < 1:
            n = keep_count(n, sp.q_m)
    return LayerTokens(vis, mm)


def _visual_edges(n_reg: int, sp: SparsityConfig, mode: str, rng) -> int:
    n = n_reg + 1
    if not sp.edge_sparse:
        return n * n
    if mode == "formula":
        return min(n * (sp.k_local + sp.k_random) * sp.block_size, n * n)
    if mode == "exact":
        return count_edges(build_edge_set(n_reg, sp.block_size, sp.k_local, sp.k_random, seed=rng))
    raise ValueError(f"unknown counting mode {mode!r}")


@dataclass
class EdgeProfile:
    visual: list[int]
    multimodal: list[int]

    @property
    def total(self) -> int:
        return sum(self.visual) + sum(self.multimodal)


def edge_profile(sp: SparsityConfig, dims: CostDims, mode: str = "formula",
                 seed=0) -> EdgeProfile:
    """Per-layer directed edge counts of the visual and multimodal stacks."""
    rng = np.random.default_rng(seed)
    counts = token_counts(sp, dims)
    vis = [_visual_edges(n, sp, mode, rng) for n in counts.visual]
    mm = [(n + 1) * dims.text_len for n in counts.multimodal]
    return EdgeProfile(vis, mm)


def dense_edges(dims: CostDims) -> int:
    n = dims.n_regional + 1
    return dims.visual_depth * n * n + dims.multimodal_depth * dims.text_len * n


def sparsity_fraction(sp: SparsityConfig, dims: CostDims, mode: str = "formula",
                      seed=0) -> Fraction:
    """S = 1 - |E| / |E_dense| as an exact rational."""
    return 1 - Fraction(edge_profile(sp, dims, mode, seed).total, dense_edges(dims))


def flops_breakdown(sp: SparsityConfig, dims: CostDims, mode: str = "formula",
                    seed=0) -> dict[str, float]:
    """FLOPs of the video encoder split into patch embedding, projections, FFN and attention.

    Dense layers count 2 FLOPs per multiply-accumulate. Attention scores and
    the weighted value sum are counted as ``d`` FLOPs per edge over all heads
    together, plus 5 FLOPs per edge per head for the softmax.
    """
    d, r = dims.dim, dims.mlp_ratio
    counts = token_counts(sp, dims)
    edges = edge_profile(sp, dims, mode, seed).visual
    patch_in = dims.patch * dims.patch * dims.channels
    out = {
        "patch": FLOPS_PER_MAC * patch_in * d * dims.n_regional,
        "projection": sum(FLOPS_PER_MAC * 4 * d * d * (n + 1) for n in counts.visual),
        "ffn": sum(FLOPS_PER_MAC * 2 * r * d * d * (n + 1) for n in counts.visual),
        "attention": sum(e * d for e in edges),
        "softmax": sum(SOFTMAX_FLOPS * dims.heads * e for e in edges),
    }
    return {k: float(v) for k, v in out.items()}


def flops_estimate(sp: SparsityConfig, dims: CostDims, mode: str = "formula", seed=0) -> float:
    """Inference GFLOPs of the video encoder for one clip."""
    return sum(flops_breakdown(sp, dims, mode, seed).values()) / 1e9


def memory_estimate(sp: SparsityConfig, dims: CostDims, batch: int = 1, mode: str = "formula",
                    seed=0) -> int:
    """Bytes of activations retained for backward over the visual stack.

    Per layer: ``ACTIVATIONS_PER_TOKEN * d`` values per live token plus logits
    and probabilities (two values) per edge per head.
    """
    if batch < 0:
        raise ValueError("batch must be >= 0")
    counts = token_counts(sp, dims)
    edges = edge_profile(sp, dims, mode, seed).visual
    elems = sum(ACTIVATIONS_PER_TOKEN * dims.dim * (n + 1) + 2 * dims.heads * e
                for n, e in zip(counts.visual, edges))
    return int(elems) * BYTES_PER_ELEMENT * batch


@dataclass
class CostReport:
    visual_edges: list[int]
    multimodal_edges: list[int]
    total_edges: int
    gflops: float
    memory_bytes: int
    sparsity: float
    mode: str = "formula"
    dims: dict = field(default_factory=dict)
    sparsity_config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [f"{'layer':<10}{'edges':>14}"]
        rows += [f"vis.{i + 1:<6}{e:>14,}" for i, e in enumerate(self.visual_edges)]
        rows += [f"mm.{i + 1:<7}{e:>14,}" for i, e in enumerate(self.multimodal_edges)]
        rows += [f"{'total':<10}{self.total_edges:>14,}",
                 f"GFLOPs    {self.gflops:>14.1f}",
                 f"memory MB {self.memory_bytes / 2**20:>14.1f}",
                 f"sparsity  {self.sparsity:>14.3f}"]
        return "\n".join(rows)


def cost_report(sp: SparsityConfig, dims: CostDims, mode: str = "formula", seed=0,
                batch: int = 1) -> CostReport:
    prof = edge_profile(sp, dims, mode, seed)
    s = 1 - Fraction(prof.total, dense_edges(dims))
    return CostReport(prof.visual, prof.multimodal, prof.total,
                      flops_estimate(sp, dims, mode, seed),
                      memory_estimate(sp, dims, batch, mode, seed), float(s), mode,
                      {**asdict(dims), "prune_layers": list(dims.prune_layers)}, asdict(sp))


def with_frames(dims: CostDims, frames: int) -> CostDims:
    return replace(dims, frames=frames)
