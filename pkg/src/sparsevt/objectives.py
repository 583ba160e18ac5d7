"""Pretraining losses: contrastive (VTC), matching (VTM), masked language modelling (MLM).

Every loss is a sum over the batch, reduced left to right by example index.
They accept numpy arrays or autograd Tensors and return a Tensor; call
``float()`` on ``.data`` for a plain number.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import CLS_ID, MASK_ID, PAD_ID

TAU_RANGE = (0.001, 0.5)


def info_nce(x, y, tau: float):
    """-sum_i log softmax_j(<x_i, y_j> / tau)[i]."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = ag.as_tensor(x) @ ag.swapaxes(ag.as_tensor(y), -1, -2) * (1.0 / tau)
    logp = ag.log_softmax(logits, axis=-1)
    b = logits.shape[0]
    return -logp[np.arange(b), np.arange(b)].sum()


def vtc_loss(z_v, z_t, tau) -> ag.Tensor:
    """Symmetric InfoNCE between row-aligned video and text features.

    ``tau`` may be a float or a scalar Tensor (learned temperature).
    """
    if isinstance(tau, ag.Tensor):
        if float(tau.data) <= 0:
            raise ValueError("temperature must be positive")
        sim = ag.as_tensor(z_v) @ ag.swapaxes(ag.as_tensor(z_t), -1, -2) / tau
        b = sim.shape[0]
        diag = (np.arange(b), np.arange(b))
        return (-ag.log_softmax(sim, axis=-1)[diag].sum()
                - ag.log_softmax(ag.swapaxes(sim, 0, 1), axis=-1)[diag].sum())
    return info_nce(z_v, z_t, tau) + info_nce(z_t, z_v, tau)


def _check_prob(p: np.ndarray, what: str):
    if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"{what} must lie strictly inside (0, 1)")


def vtm_loss(pos_scores, neg_scores) -> ag.Tensor:
    """Binary cross-entropy over matched pairs (target 1) and negatives (target 0)."""
    pos, neg = ag.as_tensor(pos_scores), ag.as_tensor(neg_scores)
    _check_prob(pos.data, "positive scores")
    _check_prob(neg.data, "negative scores")
    return -(ag.log(pos).sum() + ag.log(1.0 - neg).sum())


def vtm_loss_from_logits(pos_logits, neg_logits) -> ag.Tensor:
    """Same value as ``vtm_loss(sigmoid(pos), sigmoid(neg))`` without saturation."""
    return -(ag.log_sigmoid(pos_logits).sum() + ag.log_sigmoid(-ag.as_tensor(neg_logits)).sum())


@dataclass
class MaskPlan:
    positions: np.ndarray        # (M, 2) rows of (example, token position)
    original_ids: np.ndarray     # (M,)
    mask_prob: float = 0.15

    @property
    def n_masked(self) -> int:
        return len(self.original_ids)


def make_mask_plan(ids: np.ndarray, rng, mask_prob: float = 0.15) -> tuple[np.ndarray, MaskPlan]:
    """Replace each eligible token with MASK_ID with probability ``mask_prob``.

    Class and padding positions are never masked.
    """
    ids = np.asarray(ids)
    eligible = (ids != PAD_ID) & (ids != CLS_ID)
    draw = rng.random(ids.shape) < mask_prob
    chosen = eligible & draw
    pos = np.argwhere(chosen)
    masked = ids.copy()
    masked[chosen] = MASK_ID
    return masked, MaskPlan(pos, ids[chosen].copy(), mask_prob)


def mlm_loss(logits, plan: MaskPlan) -> ag.Tensor:
    """Cross-entropy summed over masked slots. ``logits`` is (B, L, V) or (M, V) already gathered."""
    logits = ag.as_tensor(logits)
    if plan.n_masked == 0:
        return logits.sum() * 0.0
    if logits.ndim == 3:
        logits = logits[plan.positions[:, 0], plan.positions[:, 1]]
    logp = ag.log_softmax(logits, axis=-1)
    return -logp[np.arange(plan.n_masked), plan.original_ids].sum()


def total_loss(vtc, vtm, mlm):
    """Unweighted sum of the three objectives."""
    return vtc + vtm + mlm
