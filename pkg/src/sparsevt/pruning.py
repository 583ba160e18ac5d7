"""Attention-guided token pruning (node sparsity).

A pruning site keeps the ``ceil(q * N)`` regional tokens with the highest
class-token attention and drops the rest outright. Survivors keep their
original relative order; the class token is always kept and never counted
in ``N``. Ties are broken towards the lower index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from fractions import Fraction
from math import ceil
from typing import Sequence

import numpy as np

from . import autograd as ag


def keep_count(n: int, q: float) -> int:
    """ceil(q * n) evaluated in exact rational arithmetic."""
    if not 0 < q <= 1:
        raise ValueError(f"keep rate must be in (0, 1], got {q}")
    return ceil(Fraction(str(q)) * n)


def topk_keep(scores: np.ndarray, q: float) -> np.ndarray:
    """Indices (ascending) of the ceil(q N) largest scores along the last axis."""
    scores = np.asarray(scores)
    k = keep_count(scores.shape[-1], q)
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


@dataclass
class TokenSequence:
    """A batch of token sequences whose row 0 is the class token.

    embeddings: (B, n+1, d) array or Tensor. ``coords`` (B, n, 3) hold the
    (t, h, w) grid position of each regional token and ``orig_index`` (B, n)
    its index in the original flattening, so the alive set can always be
    mapped back to the input grid.
    """
    embeddings: object
    coords: np.ndarray
    orig_index: np.ndarray
    n_original: int

    @property
    def n_regional(self) -> int:
        return self.orig_index.shape[-1]

    @property
    def alive_mask(self) -> np.ndarray:
        mask = np.zeros(self.orig_index.shape[:-1] + (self.n_original,), dtype=bool)
        np.put_along_axis(mask, self.orig_index, True, axis=-1)
        return mask

    def select(self, keep: np.ndarray) -> "TokenSequence":
        """Keep the regional rows ``keep`` (B, k) plus the class token."""
        emb = ag.as_tensor(self.embeddings)
        kept = ag.gather_rows(emb[:, 1:], keep)
        out = ag.concat([emb[:, :1], kept], axis=1)
        if not isinstance(self.embeddings, ag.Tensor):
            out = out.data
        coords = np.take_along_axis(self.coords, keep[..., None], axis=1)
        orig = np.take_along_axis(self.orig_index, keep, axis=1)
        return replace(self, embeddings=out, coords=coords, orig_index=orig)


@dataclass
class KeepDecision:
    kept_indices: np.ndarray      # (B, k) positions in the pre-prune sequence
    keep_rate: float
    scores: np.ndarray            # (B, n) scores used for ranking
    kept_original: np.ndarray | None = None   # (B, k) original token indices


@dataclass
class PruneSchedule:
    """1-based layer indices with one keep rate each, for both encoders."""
    visual_layers: tuple[int, ...] = ()
    visual_rates: tuple[float, ...] = ()
    multimodal_layers: tuple[int, ...] = ()
    multimodal_rates: tuple[float, ...] = ()

    def validate(self, visual_depth: int, multimodal_depth: int):
        for layers, rates, depth, tag in (
                (self.visual_layers, self.visual_rates, visual_depth, "visual"),
                (self.multimodal_layers, self.multimodal_rates, multimodal_depth, "multimodal")):
            if len(layers) != len(rates):
                raise ValueError(f"{tag}: {len(layers)} layers but {len(rates)} rates")
            if any(b <= a for a, b in zip(layers, layers[1:])):
                raise ValueError(f"{tag} prune layers must be strictly increasing")
            if layers and (layers[0] < 1 or layers[-1] > depth):
                raise ValueError(f"{tag} prune layers must lie in 1..{depth}")
            if any(not 0 < r <= 1 for r in rates):
                raise ValueError(f"{tag} keep rates must be in (0, 1]")

    def visual_rate(self, layer: int) -> float | None:
        if layer in self.visual_layers:
            return self.visual_rates[self.visual_layers.index(layer)]
        return None

    def multimodal_rate(self, layer: int) -> float | None:
        if layer in self.multimodal_layers:
            return self.multimodal_rates[self.multimodal_layers.index(layer)]
        return None


def _batched(tokens: TokenSequence, scores):
    emb = tokens.embeddings
    if ag.as_tensor(emb).ndim == 2:
        tokens = replace(tokens, embeddings=ag.as_tensor(emb)[None] if isinstance(emb, ag.Tensor)
                         else np.asarray(emb)[None],
                         coords=tokens.coords[None], orig_index=tokens.orig_index[None])
        return tokens, np.asarray(scores)[None], True
    return tokens, np.asarray(scores), False


def _unbatch(tokens: TokenSequence, decision: KeepDecision):
    emb = tokens.embeddings
    tokens = replace(tokens, embeddings=emb[0], coords=tokens.coords[0],
                     orig_index=tokens.orig_index[0])
    decision = replace(decision, kept_indices=decision.kept_indices[0],
                       scores=decision.scores[0], kept_original=decision.kept_original[0])
    return tokens, decision


def prune_visual(tokens: TokenSequence, cls_scores, q: float):
    """Keep the class token and the ceil(qN) regional tokens of highest score."""
    tokens, scores, single = _batched(tokens, cls_scores)
    if scores.shape != tokens.orig_index.shape:
        raise ValueError(f"scores shape {scores.shape} does not match {tokens.orig_index.shape}")
    keep = topk_keep(scores, q)
    out = tokens.select(keep)
    decision = KeepDecision(keep, q, scores, out.orig_index)
    if single:
        return _unbatch(out, decision)
    return out, decision


def cross_modal_scores(text_cls_query, visual_keys, scale=None) -> np.ndarray:
    """Softmax of the text class query against regional visual keys.

    text_cls_query: (..., d) and visual_keys: (..., N, d); with head-split
    inputs (..., heads, d) / (..., heads, N, d) the result is head-averaged.
    """
    q = ag.as_tensor(text_cls_query).data
    k = ag.as_tensor(visual_keys).data
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    logits = np.einsum("...d,...nd->...n", q * scale, k)
    return ag.softmax(logits, axis=-1).data


def prune_multimodal(visual_tokens: TokenSequence, scores, q_m: float):
    """Cross-modal pruning of the visual key/value sequence; same contract as prune_visual."""
    return prune_visual(visual_tokens, scores, q_m)


# ----------------------------------------------------------------------------
# keep-mask export

MASK_HEADER = ("layer", "frame", "row", "col", "kept")


def keep_mask_rows(layer: int, alive: np.ndarray, grid: tuple[int, int, int]) -> list[tuple]:
    """One (layer, frame, row, col, kept) row per grid cell; ``alive`` is (N,) over original tokens."""
    t_, h_, w_ = grid
    alive = np.asarray(alive).reshape(t_, h_, w_)
    return [(layer, t, h, w, int(alive[t, h, w]))
            for t in range(t_) for h in range(h_) for w in range(w_)]


def write_keep_mask_csv(path, rows: Sequence[tuple]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MASK_HEADER)
        writer.writerows(rows)


def read_keep_mask_csv(path) -> list[tuple[int, ...]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != MASK_HEADER:
            raise ValueError(f"unexpected keep-mask header {header}")
        return [tuple(int(x) for x in row) for row in reader]
