"""Sparse video-text transformer at desk scale."""
from .costmodel import CostDims, cost_report, edge_profile, flops_estimate, memory_estimate, base_dims
from .curriculum import ExpansionSchedule, Stage, compute_stage_sparsity, expand_checkpoint, validate_schedule
from .model import ModelConfig, SparseVideoText, SparsityConfig
from .topology import EdgeSet, build_edge_set, count_edges

__version__ = "0.1.0"

__all__ = ["CostDims", "cost_report", "edge_profile", "flops_estimate", "memory_estimate",
           "base_dims", "ExpansionSchedule", "Stage", "compute_stage_sparsity",
           "expand_checkpoint", "validate_schedule", "ModelConfig", "SparseVideoText",
           "SparsityConfig", "EdgeSet", "build_edge_set", "count_edges"]
