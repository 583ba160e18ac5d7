"""Dense and block-sparse scaled dot-product attention.

Inputs are head-split arrays of shape ``(..., n, d_head)``. Row 0 of every
sequence is the class token. Functions accept numpy arrays or autograd
Tensors; plain arrays in give plain arrays out.

The sparse path never materialises an ``n x n`` score matrix: each query
block gathers only the key blocks named by its EdgeSet, so cost scales with
the number of edges.
"""
from __future__ import annotations

import functools

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .topology import EdgeSet


def _arrays_stay_arrays(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        plain = not any(isinstance(a, Tensor) for a in list(args) + list(kwargs.values()))
        out = fn(*args, **kwargs)
        return out.data if plain else out
    return wrapper


def split_heads(x, n_heads: int):
    """(..., n, d) -> (..., heads, n, d / heads)."""
    x = ag.as_tensor(x)
    *lead, n, d = x.shape
    if d % n_heads:
        raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
    x = x.reshape(tuple(lead) + (n, n_heads, d // n_heads))
    return ag.swapaxes(x, -2, -3)


def merge_heads(x):
    x = ag.as_tensor(x)
    *lead, h, n, dh = x.shape
    return ag.swapaxes(x, -2, -3).reshape(tuple(lead) + (n, h * dh))


class RelPosBias:
    """Learned scalar per head indexed by the (dt, dh, dw) offset between key and query.

    ``table`` has shape ``(heads, 2T-1, 2H-1, 2W-1)``. Pairs involving the class
    token get zero bias.
    """

    def __init__(self, table):
        self.table = ag.as_tensor(table)
        heads, a, b, c = self.table.shape
        if a % 2 == 0 or b % 2 == 0 or c % 2 == 0:
            raise ValueError("relative bias table dims must be odd (2X-1)")
        self.heads = heads
        self.extent = ((a + 1) // 2, (b + 1) // 2, (c + 1) // 2)

    def index(self, q_coords: np.ndarray, k_coords: np.ndarray) -> np.ndarray:
        """Flat table index for every query/key pair; coords are (..., n, 3) ints.

        The flat index of an offset is separable: code(key) - code(query) + const.
        """
        T, H, W = self.extent
        for c in (q_coords, k_coords):
            if c.size and (c.min() < 0 or np.any(c.reshape(-1, 3).max(axis=0) >= (T, H, W))):
                raise IndexError("grid coordinate outside the bias table extent")
        sw, sh = 2 * W - 1, (2 * H - 1) * (2 * W - 1)

        def code(c):
            return (c[..., 0] * sh + c[..., 1] * sw + c[..., 2]).astype(np.int64)

        const = (T - 1) * sh + (H - 1) * sw + (W - 1)
        return code(k_coords)[..., None, :] - code(q_coords)[..., :, None] + const

    def lookup(self, flat_index: np.ndarray, pair_dims: int = 2):
        """Bias Tensor of shape (*batch, heads, *pair) for an index of shape (*batch, *pair)."""
        flat = self.table.reshape(self.heads, -1)
        out = ag.take(flat, flat_index, axis=1)
        nbatch = flat_index.ndim - pair_dims
        return ag.transpose(out, tuple(range(1, nbatch + 1)) + (0,)
                            + tuple(range(nbatch + 1, out.ndim)))

    def dense(self, coords: np.ndarray):
        """(..., heads, N+1, N+1) bias with a zero class-token row and column."""
        core = self.lookup(self.index(coords, coords))
        return _pad_cls(core)


def _pad_cls(core):
    # zero row then zero column in front of the regional block
    shp = core.shape
    zrow = np.zeros(shp[:-2] + (1, shp[-1]), dtype=core.dtype)
    x = ag.concat([zrow, core], axis=-2)
    zcol = np.zeros(shp[:-2] + (shp[-2] + 1, 1), dtype=core.dtype)
    return ag.concat([zcol, x], axis=-1)


def _scale(q, scale):
    q = ag.as_tensor(q)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    return q * np.asarray(scale, dtype=q.dtype)


@_arrays_stay_arrays
def dense_attention(q, k, v, bias=None, mask=None, scale=None):
    """softmax(q k^T * scale + bias) v, softmax restricted to ``mask`` if given."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if k.shape[-2] != v.shape[-2] or q.shape[-1] != k.shape[-1]:
        raise ValueError(f"shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    logits = _scale(q, scale) @ ag.swapaxes(k, -1, -2)
    if bias is not None:
        logits = logits + bias
    return ag.softmax(logits, axis=-1, mask=mask) @ v


def dense_attention_probs(q, k, bias=None, mask=None, scale=None) -> np.ndarray:
    q, k = ag.as_tensor(q), ag.as_tensor(k)
    logits = _scale(q, scale).data @ np.swapaxes(k.data, -1, -2)
    if bias is not None:
        logits = logits + ag.as_tensor(bias).data
    return ag.softmax(logits, axis=-1, mask=mask).data


def _pad_rows(x, total: int):
    """Pad the token axis (-2) of x with zeros up to ``total`` rows."""
    n = x.shape[-2]
    if n == total:
        return x
    z = np.zeros(x.shape[:-2] + (total - n, x.shape[-1]), dtype=x.dtype)
    return ag.concat([x, z], axis=-2)


@_arrays_stay_arrays
def sparse_attention(q, k, v, edges: EdgeSet, rel_bias: RelPosBias | None = None,
                     coords: np.ndarray | None = None, scale=None):
    """Attention restricted to the graph ``edges``.

    q, k, v: (..., N+1, d_head) with the class token at row 0. ``coords`` are
    the (..., N, 3) grid positions of the regional tokens, needed only with
    ``rel_bias``; batch dims of coords must match the leading batch dims of q.
    Without global edges the class token attends only to itself.
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    layout = edges.layout
    n, g, nb = layout.n_tokens, layout.block_size, layout.n_blocks
    if q.shape[-2] != n + 1 or k.shape[-2] != n + 1 or v.shape[-2] != n + 1:
        raise ValueError(f"edge layout has {n} regional tokens, inputs have "
                         f"{q.shape[-2]}/{k.shape[-2]}/{v.shape[-2]} rows incl. cls")
    lead = q.shape[:-2]
    dh = q.shape[-1]
    qs = _scale(q, scale)

    nbr, nbr_valid = edges.neighbor_table()
    m = nbr.shape[1]
    real = np.arange(nb * g) < n                                   # padding slots
    key_ok = (nbr_valid[:, :, None] & real.reshape(nb, g)[nbr]).reshape(nb, m * g)
    cls_col = np.full((nb, 1), edges.has_global)
    mask = np.concatenate([cls_col, key_ok], axis=1)[:, None, :]   # (nb, 1, 1+m*g)

    def blocks(x):
        return _pad_rows(x[..., 1:, :], nb * g).reshape(lead + (nb, g, dh))

    q_b, k_b, v_b = blocks(qs), blocks(k), blocks(v)
    k_g = ag.take(k_b, nbr, axis=-3).reshape(lead + (nb, m * g, dh))
    v_g = ag.take(v_b, nbr, axis=-3).reshape(lead + (nb, m * g, dh))
    k_cls = ag.swapaxes(k[..., 0:1, :], -1, -2).reshape(lead + (1, dh, 1))
    v_cls = v[..., 0:1, :].reshape(lead + (1, 1, dh))

    s_cls = q_b @ k_cls                                            # (..., nb, g, 1)
    s_reg = q_b @ ag.swapaxes(k_g, -1, -2)                         # (..., nb, g, m*g)
    logits = ag.concat([s_cls, s_reg], axis=-1)

    if rel_bias is not None:
        if coords is None:
            raise ValueError("coords are required with rel_bias")
        coords = np.asarray(coords)
        cb = np.zeros(coords.shape[:-2] + (nb * g, 3), dtype=coords.dtype)
        cb[..., :n, :] = coords
        cb = cb.reshape(coords.shape[:-2] + (nb, g, 3))
        kc = np.take(cb, nbr, axis=-3).reshape(coords.shape[:-2] + (nb, m * g, 3))
        # invalid slots point at the query's own coordinate so the index stays in range
        kc = np.where(key_ok[..., None], kc, cb[..., :1, :])
        idx = rel_bias.index(cb, kc)                               # (*b, nb, g, m*g)
        reg_bias = rel_bias.lookup(idx, 3)                           # (*b, h, nb, g, m*g)
        zero = np.zeros(reg_bias.shape[:-1] + (1,), dtype=reg_bias.dtype)
        logits = logits + ag.concat([zero, reg_bias], axis=-1)

    p = ag.softmax(logits, axis=-1, mask=mask)
    out_b = p[..., 0:1] * v_cls + p[..., 1:] @ v_g
    reg_out = out_b.reshape(lead + (nb * g, dh))[..., :n, :]

    # class-token query row attends to itself and every regional token, unbiased
    cls_logits = qs[..., 0:1, :] @ ag.swapaxes(k, -1, -2)          # (..., 1, n+1)
    cls_mask = np.ones(n + 1, dtype=bool)
    if not edges.has_global:
        cls_mask[1:] = False
    cls_out = ag.softmax(cls_logits, axis=-1, mask=cls_mask) @ v
    return ag.concat([cls_out, reg_out], axis=-2)


def cls_attention(q, k, scale=None, average_heads: bool = True) -> np.ndarray:
    """Class-token attention over regional keys only (rows 1..N), softmax-normalised.

    q, k: (..., heads, N+1, d_head) or (..., N+1, d_head). Returns (..., N),
    averaged over the head axis when ``average_heads`` and q is head-split.
    """
    q = ag.as_tensor(q).data
    k = ag.as_tensor(k).data
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q[..., 0:1, :] * scale) @ np.swapaxes(k[..., 1:, :], -1, -2)
    a = ag.softmax(logits[..., 0, :], axis=-1).data
    if average_heads and a.ndim >= 2:
        a = a.mean(axis=-2)
    return a


def extract_cls_attention(q, k, scale=None) -> np.ndarray:
    return cls_attention(q, k, scale=scale, average_heads=q.ndim >= 3)
