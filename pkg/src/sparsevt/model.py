"""Sparse video-text transformer: video encoder, text encoder, multimodal encoder.

All blocks are pre-norm (norm -> attention -> residual -> norm -> FFN ->
residual). The video encoder runs block-sparse self-attention with relative
position bias and prunes regional tokens by class attention at the
configured layers. The multimodal encoder lets text queries cross-attend to
the surviving video tokens and prunes those once more after its first layer,
using the text class query.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from math import floor

import numpy as np

from . import autograd as ag
from .attention import RelPosBias, cls_attention, dense_attention, sparse_attention
from .pruning import (KeepDecision, PruneSchedule, TokenSequence, cross_modal_scores, keep_count,
                      topk_keep)
from .topology import build_edge_set, complete_edge_set, reorder_tokens

PAD_ID, CLS_ID, MASK_ID = 0, 1, 2


@dataclass(frozen=True)
class SparsityConfig:
    """Edge sparsity (K_l, K_r, G) and node sparsity (q_v, q_m); k_local=None means dense edges."""
    k_local: int | None = None
    k_random: int = 0
    block_size: int = 56
    q_v: float = 1.0
    q_m: float = 1.0

    @property
    def edge_sparse(self) -> bool:
        return self.k_local is not None


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 4
    frame_size: int = 32
    patch: int = 8
    channels: int = 3
    dim: int = 64
    heads: int = 4
    visual_depth: int = 6
    text_depth: int = 4          # includes the multimodal layers stacked on top
    multimodal_depth: int = 2
    text_len: int = 16
    vocab: int = 256
    mlp_ratio: int = 4
    prune_layers: tuple[int, ...] = (2, 4, 5)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    token_order: str = "standard"
    attention_impl: str = "auto"   # "auto" | "sparse" | "dense"
    dtype: str = "float32"

    def __post_init__(self):
        if self.frame_size % self.patch:
            raise ValueError("frame_size must be divisible by patch")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if not self.multimodal_depth < self.text_depth:
            raise ValueError("multimodal_depth must be smaller than text_depth")
        self.prune_schedule.validate(self.visual_depth, self.multimodal_depth)

    @property
    def grid(self) -> tuple[int, int, int]:
        s = self.frame_size // self.patch
        return (self.frames, s, s)

    @property
    def n_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def prune_schedule(self) -> PruneSchedule:
        sp = self.sparsity
        vis = tuple(self.prune_layers) if sp.q_v < 1 else ()
        return PruneSchedule(vis, (sp.q_v,) * len(vis),
                             (1,) if sp.q_m < 1 else (), (sp.q_m,) if sp.q_m < 1 else ())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prune_layers"] = list(self.prune_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["sparsity"] = SparsityConfig(**d.get("sparsity", {}))
        if "prune_layers" in d:
            d["prune_layers"] = tuple(d["prune_layers"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ----------------------------------------------------------------------------
# positional tables


def temporal_source_frames(t_from: int, t_to: int) -> list[int]:
    """1-based source frame for each target frame: floor(t * T1/T2 + 1/2), clamped to [1, T1]."""
    if t_from < 1 or t_to < 1:
        raise ValueError("frame counts must be >= 1")
    out = []
    for t in range(1, t_to + 1):
        src = floor(Fraction(t * t_from, t_to) + Fraction(1, 2))
        out.append(min(max(src, 1), t_from))
    return out


def inflate_pos_embed(pos2d: np.ndarray, frames: int) -> np.ndarray:
    """(HW+1, d) image table -> (T*HW+1, d) by repeating the spatial rows per frame."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    return np.concatenate([pos2d[:1], np.tile(pos2d[1:], (frames, 1))], axis=0)


def interpolate_pos_embed(pos: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
    """Nearest-neighbour temporal resize of a (T1*HW+1, d) table to T2 frames; cls row untouched."""
    hw = (pos.shape[0] - 1) // t_from
    if hw * t_from + 1 != pos.shape[0]:
        raise ValueError("table rows are not T1*HW+1")
    frames = pos[1:].reshape(t_from, hw, -1)
    src = np.asarray(temporal_source_frames(t_from, t_to)) - 1
    return np.concatenate([pos[:1], frames[src].reshape(t_to * hw, -1)], axis=0)


def inflate_rel_pos_bias(table2d: np.ndarray, frames: int) -> np.ndarray:
    """(..., 2H-1, 2W-1) -> (..., 2T-1, 2H-1, 2W-1); every temporal slice starts equal to the source."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    return np.repeat(table2d[..., None, :, :], 2 * frames - 1, axis=-3)


def interpolate_rel_pos_bias(table: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
    """Resize the temporal-offset axis (-3) from 2*T1-1 to 2*T2-1 slices, same rule as the pos table."""
    src = np.asarray(temporal_source_frames(2 * t_from - 1, 2 * t_to - 1)) - 1
    if table.shape[-3] != 2 * t_from - 1:
        raise ValueError("relative table temporal extent does not match t_from")
    return np.take(table, src, axis=-3)


# ----------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, ag.Parameter]:
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    d, hid = cfg.dim, cfg.dim * cfg.mlp_ratio
    t_, h_, w_ = cfg.grid
    params: dict[str, np.ndarray] = {}

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    def block(prefix, cross=False):
        params[f"{prefix}.ln1.g"] = np.ones(d, dt)
        params[f"{prefix}.ln1.b"] = np.zeros(d, dt)
        params[f"{prefix}.qkv.w"] = normal(d, 3 * d)
        params[f"{prefix}.qkv.b"] = np.zeros(3 * d, dt)
        params[f"{prefix}.proj.w"] = normal(d, d)
        params[f"{prefix}.proj.b"] = np.zeros(d, dt)
        if cross:
            params[f"{prefix}.lnx.g"] = np.ones(d, dt)
            params[f"{prefix}.lnx.b"] = np.zeros(d, dt)
            params[f"{prefix}.xq.w"] = normal(d, d)
            params[f"{prefix}.xq.b"] = np.zeros(d, dt)
            params[f"{prefix}.xkv.w"] = normal(d, 2 * d)
            params[f"{prefix}.xkv.b"] = np.zeros(2 * d, dt)
            params[f"{prefix}.xproj.w"] = normal(d, d)
            params[f"{prefix}.xproj.b"] = np.zeros(d, dt)
        params[f"{prefix}.ln2.g"] = np.ones(d, dt)
        params[f"{prefix}.ln2.b"] = np.zeros(d, dt)
        params[f"{prefix}.fc1.w"] = normal(d, hid)
        params[f"{prefix}.fc1.b"] = np.zeros(hid, dt)
        params[f"{prefix}.fc2.w"] = normal(hid, d)
        params[f"{prefix}.fc2.b"] = np.zeros(d, dt)

    patch_dim = cfg.patch * cfg.patch * cfg.channels
    params["vis.patch.w"] = normal(patch_dim, d)
    params["vis.patch.b"] = np.zeros(d, dt)
    params["vis.cls"] = normal(d)
    params["vis.pos"] = normal(t_ * h_ * w_ + 1, d)
    for l in range(cfg.visual_depth):
        block(f"vis.{l}")
        params[f"vis.{l}.relpos"] = np.zeros((cfg.heads, 2 * t_ - 1, 2 * h_ - 1, 2 * w_ - 1), dt)
    params["vis.norm.g"] = np.ones(d, dt)
    params["vis.norm.b"] = np.zeros(d, dt)
    params["vis.head.w"] = normal(d, d)
    params["vis.head.b"] = np.zeros(d, dt)

    params["txt.tok"] = normal(cfg.vocab, d)
    params["txt.pos"] = normal(cfg.text_len + 1, d)
    for l in range(cfg.text_depth - cfg.multimodal_depth):
        block(f"txt.{l}")
    params["txt.norm.g"] = np.ones(d, dt)
    params["txt.norm.b"] = np.zeros(d, dt)
    params["txt.head.w"] = normal(d, d)
    params["txt.head.b"] = np.zeros(d, dt)

    for l in range(cfg.multimodal_depth):
        block(f"mm.{l}", cross=True)
    params["mm.norm.g"] = np.ones(d, dt)
    params["mm.norm.b"] = np.zeros(d, dt)
    params["vtm.w"] = normal(d, 1)
    params["vtm.b"] = np.zeros(1, dt)
    params["mlm.w"] = normal(d, cfg.vocab)
    params["mlm.b"] = np.zeros(cfg.vocab, dt)
    params["log_tau"] = np.array(np.log(0.07), dtype=dt)
    return {k: ag.Parameter(v, name=k) for k, v in params.items()}


# ----------------------------------------------------------------------------
# forward pieces


def _ln(p, prefix, x):
    return ag.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _linear(p, prefix, x):
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _split_qkv(qkv, heads):
    b, n, three_d = qkv.shape
    dh = three_d // (3 * heads)
    t = ag.transpose(qkv.reshape(b, n, 3, heads, dh), (2, 0, 3, 1, 4))
    return t[0], t[1], t[2]


def _heads(x, heads):
    b, n, d = x.shape
    return ag.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def _merge(x):
    b, h, n, dh = x.shape
    return ag.transpose(x, (0, 2, 1, 3)).reshape(b, n, h * dh)


def _ffn(p, prefix, x):
    h = _ln(p, f"{prefix}.ln2", x)
    return x + _linear(p, f"{prefix}.fc2", ag.gelu(_linear(p, f"{prefix}.fc1", h)))


def patchify(clips: np.ndarray, patch: int) -> np.ndarray:
    """(B, T, H, W, C) -> (B, T*H'*W', patch*patch*C), tokens in row-major (t, h, w)."""
    b, t, h, w, c = clips.shape
    if h % patch or w % patch:
        raise ValueError(f"frame {h}x{w} not divisible by patch {patch}")
    x = clips.reshape(b, t, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t * (h // patch) * (w // patch), patch * patch * c)


@dataclass
class VideoOutput:
    embedding: object                    # (B, d) joint-space feature, L2-normalised
    tokens: TokenSequence                # final normalised states of surviving tokens
    decisions: list[tuple[int, KeepDecision]]


@dataclass
class TextOutput:
    embedding: object                    # (B, d) joint-space feature, L2-normalised
    states: object                       # (B, L+1, d) pre-norm hidden states
    key_mask: np.ndarray                 # (B, L+1) True where not padding


class SparseVideoText:
    """Parameters plus forward passes. The config fixes all shapes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, ag.Parameter] | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._check()

    def _check(self):
        ref = init_params(self.cfg, 0)
        missing = set(ref) - set(self.params)
        extra = set(self.params) - set(ref)
        if missing or extra:
            raise ValueError(f"checkpoint/config mismatch: missing={sorted(missing)[:5]} "
                             f"extra={sorted(extra)[:5]}")
        for k, v in ref.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"checkpoint/config mismatch for {k}: "
                                 f"{self.params[k].shape} vs {v.shape}")

    # -- tokeniser ----------------------------------------------------------

    def tokenize(self, clips: np.ndarray) -> TokenSequence:
        cfg, p = self.cfg, self.params
        clips = np.asarray(clips, dtype=cfg.dtype)
        if clips.ndim == 4:
            clips = clips[None]
        if clips.shape[1:] != (cfg.frames, cfg.frame_size, cfg.frame_size, cfg.channels):
            raise ValueError(f"clip shape {clips.shape[1:]} does not match config")
        b = clips.shape[0]
        patches = patchify(clips, cfg.patch)
        x = patches @ p["vis.patch.w"] + p["vis.patch.b"] + p["vis.pos"][1:]
        cls = (p["vis.cls"] + p["vis.pos"][0]).reshape(1, 1, cfg.dim)
        cls = cls + np.zeros((b, 1, cfg.dim), dtype=cfg.dtype)
        order = reorder_tokens(cfg.grid, cfg.token_order).permutation
        if cfg.token_order != "standard":
            x = ag.take(x, order, axis=1)
        coords = np.stack(np.unravel_index(order, cfg.grid), axis=-1)
        n = cfg.n_tokens
        return TokenSequence(ag.concat([cls, x], axis=1),
                             np.broadcast_to(coords, (b, n, 3)).copy(),
                             np.broadcast_to(order, (b, n)).copy(), n)

    # -- video ----------------------------------------------------------------

    def _use_sparse(self) -> bool:
        impl = self.cfg.attention_impl
        if impl == "auto":
            return self.cfg.sparsity.edge_sparse
        return impl == "sparse"

    def video_block(self, l: int, seq: TokenSequence, rng, edges=None):
        """One visual block; returns (new sequence, cls scores from this layer's attention)."""
        cfg, p = self.cfg, self.params
        x = ag.as_tensor(seq.embeddings)
        n = seq.n_regional
        q, k, v = _split_qkv(_linear(p, f"vis.{l}.qkv", _ln(p, f"vis.{l}.ln1", x)), cfg.heads)
        rel = RelPosBias(p[f"vis.{l}.relpos"])
        if self._use_sparse():
            if edges is None:
                sp = cfg.sparsity
                if sp.edge_sparse:
                    edges = build_edge_set(n, sp.block_size, sp.k_local, sp.k_random, seed=rng)
                else:
                    edges = complete_edge_set(n, sp.block_size)
            attn = sparse_attention(q, k, v, edges, rel_bias=rel, coords=seq.coords)
        else:
            attn = dense_attention(q, k, v, bias=rel.dense(seq.coords))
        x = x + _linear(p, f"vis.{l}.proj", _merge(attn))
        scores = cls_attention(q.data, k.data)
        return replace(seq, embeddings=x), scores

    def encode_video(self, clips, rng=None, keep_override: dict | None = None) -> VideoOutput:
        cfg, p = self.cfg, self.params
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        seq = self.tokenize(clips)
        schedule = cfg.prune_schedule
        decisions = []
        for l in range(cfg.visual_depth):
            seq, scores = self.video_block(l, seq, rng)
            rate = schedule.visual_rate(l + 1)
            if rate is not None:
                keep = topk_keep(scores, rate)
                if keep_override and (l + 1) in keep_override:
                    keep = keep_override[l + 1]
                seq = seq.select(keep)
                decisions.append((l + 1, KeepDecision(keep, rate, scores, seq.orig_index)))
            seq = replace(seq, embeddings=_ffn(p, f"vis.{l}", seq.embeddings))
        normed = _ln(p, "vis.norm", seq.embeddings)
        z = ag.l2_normalize(_linear(p, "vis.head", normed[:, 0]))
        return VideoOutput(z, replace(seq, embeddings=normed), decisions)

    # -- text -----------------------------------------------------------------

    def text_inputs(self, token_ids) -> tuple[np.ndarray, np.ndarray]:
        """Prepend the class id and pad to text_len+1. Accepts a list of id lists or an array."""
        cfg = self.cfg
        rows = [list(r) for r in token_ids]
        ids = np.full((len(rows), cfg.text_len + 1), PAD_ID, dtype=np.int64)
        for i, r in enumerate(rows):
            r = [int(t) for t in r if int(t) != PAD_ID]
            if len(r) > cfg.text_len:
                raise ValueError(f"caption length {len(r)} exceeds text_len {cfg.text_len}")
            if any(t < 0 or t >= cfg.vocab for t in r):
                raise ValueError("token id out of vocabulary")
            ids[i, 0] = CLS_ID
            ids[i, 1:1 + len(r)] = r
        return ids, ids != PAD_ID

    def encode_text(self, token_ids) -> TextOutput:
        cfg, p = self.cfg, self.params
        if _is_prepared(token_ids, cfg.text_len + 1):
            ids = np.asarray(token_ids)
            if ids.min() < 0 or ids.max() >= cfg.vocab:
                raise ValueError("token id out of vocabulary")
            key_mask = ids != PAD_ID
        else:
            ids, key_mask = self.text_inputs(token_ids)
        x = ag.take(p["txt.tok"], ids, axis=0) + p["txt.pos"]
        mask = key_mask[:, None, None, :]
        for l in range(cfg.text_depth - cfg.multimodal_depth):
            pre = f"txt.{l}"
            q, k, v = _split_qkv(_linear(p, f"{pre}.qkv", _ln(p, f"{pre}.ln1", x)), cfg.heads)
            x = x + _linear(p, f"{pre}.proj", _merge(dense_attention(q, k, v, mask=mask)))
            x = _ffn(p, pre, x)
        z = ag.l2_normalize(_linear(p, "txt.head", _ln(p, "txt.norm", x)[:, 0]))
        return TextOutput(z, x, key_mask)

    # -- multimodal -----------------------------------------------------------

    def multimodal(self, video: TokenSequence, text: TextOutput, q_m: float | None = None,
                   collect: list | None = None):
        """Fused text states (B, L+1, d) after the multimodal layers.

        Visual tokens are pruned once, after the first layer's cross-attention,
        keeping ceil(q_m N) regional tokens by text-class attention.
        """
        cfg, p = self.cfg, self.params
        if video.n_regional < 1:
            raise ValueError("empty visual sequence")
        q_m = cfg.sparsity.q_m if q_m is None else q_m
        x = ag.as_tensor(text.states)
        self_mask = text.key_mask[:, None, None, :]
        for l in range(cfg.multimodal_depth):
            pre = f"mm.{l}"
            q, k, v = _split_qkv(_linear(p, f"{pre}.qkv", _ln(p, f"{pre}.ln1", x)), cfg.heads)
            x = x + _linear(p, f"{pre}.proj", _merge(dense_attention(q, k, v, mask=self_mask)))
            xq = _heads(_linear(p, f"{pre}.xq", _ln(p, f"{pre}.lnx", x)), cfg.heads)
            kv = _linear(p, f"{pre}.xkv", video.embeddings)
            d = cfg.dim
            xk = _heads(kv[..., :d], cfg.heads)
            xv = _heads(kv[..., d:], cfg.heads)
            x = x + _linear(p, f"{pre}.xproj", _merge(dense_attention(xq, xk, xv)))
            if l == 0 and q_m < 1:
                scores = cross_attention_scores(xq.data, xk.data)
                keep = topk_keep(scores, q_m)
                video = video.select(keep)
                if collect is not None:
                    collect.append(KeepDecision(keep, q_m, scores, video.orig_index))
            x = _ffn(p, pre, x)
        return _ln(p, "mm.norm", x)

    def vtm_logit(self, fused):
        return _linear(self.params, "vtm", fused[:, 0])[:, 0]

    def mlm_logits(self, fused):
        return _linear(self.params, "mlm", fused)

    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"].data))


def _is_prepared(ids, width: int) -> bool:
    """True for an int array already laid out as [CLS, tokens..., PAD...] rows."""
    return (isinstance(ids, np.ndarray) and ids.ndim == 2 and ids.shape[1] == width
            and bool(np.all(ids[:, 0] == CLS_ID)))


def cross_attention_scores(text_q: np.ndarray, video_k: np.ndarray) -> np.ndarray:
    """Head-averaged text-class attention over regional video keys: (B, N)."""
    a = cross_modal_scores(text_q[:, :, 0, :], video_k[:, :, 1:, :])
    return a.mean(axis=1)


def expected_survivors(n: int, rates) -> list[int]:
    """Regional token count after each successive prune site."""
    out = []
    for r in rates:
        n = keep_count(n, r)
        out.append(n)
    return out
