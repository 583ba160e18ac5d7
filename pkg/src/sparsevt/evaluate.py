"""Text-to-video retrieval, the shuffled-frame temporal probe, and keep-mask export."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, sample_frames, to_model_input
from .model import SparseVideoText
from .pruning import keep_mask_rows, write_keep_mask_csv


@dataclass
class RetrievalResult:
    r1: float
    r5: float
    r10: float
    ranks: np.ndarray = field(repr=False)     # 0-based rank of the true video per caption

    @property
    def mean(self) -> float:
        return (self.r1 + self.r5 + self.r10) / 3

    def to_dict(self) -> dict:
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10, "mean": self.mean,
                "n": int(len(self.ranks))}


def recall_from_similarity(sim: np.ndarray) -> RetrievalResult:
    """Row i is caption i scored against every video; video i is the match.

    The rank counts videos scoring strictly higher than the match, so ties
    resolve in the match's favour.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise ValueError(f"need a non-empty square similarity matrix, got {sim.shape}")
    ranks = (sim > np.diag(sim)[:, None]).sum(axis=1)
    r = [100.0 * float(np.mean(ranks < k)) for k in (1, 5, 10)]
    return RetrievalResult(*r, ranks)


def _clips(corpus: Corpus, idx: np.ndarray, frames: int, perms=None) -> np.ndarray:
    sel = sample_frames(corpus.frames.shape[1], frames)
    out = corpus.frames[idx][:, sel]
    if perms is not None:
        out = np.stack([clip[p] for clip, p in zip(out, perms)])
    return to_model_input(out)


def embed(model: SparseVideoText, corpus: Corpus, idx: np.ndarray, seed: int = 0,
          perms=None, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(video, text) joint-space embeddings for clips ``idx``."""
    rng = np.random.default_rng(seed)
    zv, zt = [], []
    for s in range(0, len(idx), batch):
        chunk = idx[s:s + batch]
        p = None if perms is None else perms[s:s + batch]
        clips = _clips(corpus, chunk, model.cfg.frames, p)
        zv.append(np.asarray(model.encode_video(clips, rng).embedding.data))
        zt.append(np.asarray(model.encode_text([corpus.tokens[i] for i in chunk]).embedding.data))
    return np.concatenate(zv), np.concatenate(zt)


def evaluate_retrieval(model: SparseVideoText, corpus: Corpus, split: str = "test",
                       seed: int = 0, perms=None, subset: np.ndarray | None = None) -> RetrievalResult:
    """Rank every candidate video of the split for each caption by cosine similarity."""
    idx = corpus.indices(split)
    if subset is not None:
        idx = idx[np.asarray(subset)[idx]]
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    zv, zt = embed(model, corpus, idx, seed, perms)
    return recall_from_similarity(zt @ zv.T)


@dataclass
class ProbeResult:
    normal: RetrievalResult
    shuffled: RetrievalResult

    @property
    def delta(self) -> float:
        return self.normal.mean - self.shuffled.mean

    def to_dict(self) -> dict:
        return {"normal": self.normal.to_dict(), "shuffled": self.shuffled.to_dict(),
                "delta": self.delta}


def temporal_probe(model: SparseVideoText, corpus: Corpus, split: str = "test", seed: int = 0,
                   motion_only: bool = False, perms=None) -> ProbeResult:
    """Retrieval with normal and per-clip shuffled frame order."""
    t = model.cfg.frames
    if t < 2:
        raise ValueError("the temporal probe needs at least 2 frames")
    subset = corpus.motion_mask() if motion_only else None
    idx = corpus.indices(split)
    n = int(np.sum(subset[idx])) if subset is not None else len(idx)
    if perms is None:
        rng = np.random.default_rng(seed)
        perms = [rng.permutation(t) for _ in range(n)]
    normal = evaluate_retrieval(model, corpus, split, seed, subset=subset)
    shuffled = evaluate_retrieval(model, corpus, split, seed, perms=perms, subset=subset)
    return ProbeResult(normal, shuffled)


def export_masks(model: SparseVideoText, clip: np.ndarray, path=None, caption=None,
                 seed: int = 0) -> list[tuple]:
    """Keep-mask rows for every visual prune layer (and the multimodal site if a caption is given).

    ``clip`` is (T, H, W, C) model input. Layers without pruning export all ones.
    """
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    out = model.encode_video(clip[None], rng)
    decided = {layer: d for layer, d in out.decisions}
    n = cfg.n_tokens
    rows = []
    for layer in cfg.prune_layers:
        alive = np.ones(n, dtype=int)
        if layer in decided:
            alive[:] = 0
            alive[decided[layer].kept_original[0]] = 1
        rows += keep_mask_rows(layer, alive, cfg.grid)
    if caption is not None:
        collect = []
        model.multimodal(out.tokens, model.encode_text([caption]), collect=collect)
        alive = np.zeros(n, dtype=int)
        if collect:
            alive[collect[0].kept_original[0]] = 1
        else:
            alive[out.tokens.orig_index[0]] = 1
        rows += keep_mask_rows(cfg.visual_depth + 1, alive, cfg.grid)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_keep_mask_csv(path, rows)
    return rows
