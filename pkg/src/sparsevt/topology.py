"""Block-sparse attention graphs: chunking, local/random/global edges, token orders.

Regional tokens are chunked into contiguous blocks of ``block_size``. A block
attends to the blocks within ``(K_l - 1) / 2`` of itself (clipped at the ends,
no wraparound) plus ``K_r`` random blocks outside that window. The class token
is kept out of the blocks and linked to every regional token in both
directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np


@dataclass(frozen=True)
class BlockLayout:
    n_tokens: int
    block_size: int

    @property
    def n_blocks(self) -> int:
        return ceil(self.n_tokens / self.block_size)

    @property
    def pad(self) -> int:
        return self.n_blocks * self.block_size - self.n_tokens

    def block_sizes(self) -> np.ndarray:
        """Number of real (non-padding) tokens in each block."""
        sizes = np.full(self.n_blocks, self.block_size, dtype=np.int64)
        sizes[-1] -= self.pad
        return sizes

    def block_of(self, token: int) -> int:
        return token // self.block_size


def chunk_blocks(n_tokens: int, block_size: int) -> BlockLayout:
    if n_tokens < 1 or block_size < 1:
        raise ValueError(f"n_tokens and block_size must be >= 1, got {n_tokens}, {block_size}")
    return BlockLayout(int(n_tokens), int(block_size))


def _radius(k_local: int) -> int:
    if k_local < 1 or k_local % 2 == 0:
        raise ValueError(f"K_l must be odd and >= 1, got {k_local}")
    return (k_local - 1) // 2


def build_local_edges(layout: BlockLayout, k_local: int) -> set[tuple[int, int]]:
    delta = _radius(k_local)
    nb = layout.n_blocks
    return {(k, kk) for k in range(nb)
            for kk in range(max(0, k - delta), min(nb, k + delta + 1))}


def build_random_edges(layout: BlockLayout, k_local: int, k_random: int,
                       seed=None) -> list[list[int]]:
    """Sample, per block, ``min(K_r, #candidates)`` distinct blocks outside the local window.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if k_random < 0:
        raise ValueError("K_r must be >= 0")
    delta = _radius(k_local)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nb = layout.n_blocks
    out = []
    for k in range(nb):
        candidates = [kk for kk in range(nb) if abs(kk - k) > delta]
        m = min(k_random, len(candidates))
        if m == 0:
            out.append([])
            continue
        picked = rng.choice(len(candidates), size=m, replace=False)
        out.append(sorted(candidates[i] for i in picked))
    return out


def build_global_edges(n_tokens: int) -> int:
    """Directed edges contributed by the class token, including its self-edge."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    return 2 * n_tokens + 1


@dataclass(frozen=True)
class EdgeSet:
    layout: BlockLayout
    local_radius: int
    random_neighbors: tuple[tuple[int, ...], ...]
    has_global: bool = True
    complete: bool = False

    def neighbors(self, k: int) -> list[int]:
        """All key blocks for query block ``k``, ascending."""
        if self.complete:
            return list(range(self.layout.n_blocks))
        nb = self.layout.n_blocks
        local = range(max(0, k - self.local_radius), min(nb, k + self.local_radius + 1))
        return sorted(set(local) | set(self.random_neighbors[k]))

    def neighbor_table(self) -> tuple[np.ndarray, np.ndarray]:
        """(n_blocks, M) block index table padded with 0 and its validity mask."""
        lists = [self.neighbors(k) for k in range(self.layout.n_blocks)]
        width = max(len(x) for x in lists)
        idx = np.zeros((len(lists), width), dtype=np.int64)
        valid = np.zeros((len(lists), width), dtype=bool)
        for k, nbrs in enumerate(lists):
            idx[k, :len(nbrs)] = nbrs
            valid[k, :len(nbrs)] = True
        return idx, valid

    def token_mask(self) -> np.ndarray:
        """Dense (N+1) x (N+1) boolean adjacency, row/col 0 being the class token."""
        n = self.layout.n_tokens
        g = self.layout.block_size
        mask = np.zeros((n + 1, n + 1), dtype=bool)
        for k in range(self.layout.n_blocks):
            q0, q1 = k * g, min((k + 1) * g, n)
            for kk in self.neighbors(k):
                k0, k1 = kk * g, min((kk + 1) * g, n)
                mask[1 + q0:1 + q1, 1 + k0:1 + k1] = True
        if self.has_global:
            mask[0, :] = True
            mask[:, 0] = True
        return mask

    def dump(self) -> str:
        """Adjacency listing, one ``block_k: [neighbors]`` line per block."""
        return "\n".join(f"block_{k}: {self.neighbors(k)}"
                         for k in range(self.layout.n_blocks)) + "\n"


def build_edge_set(n_tokens: int, block_size: int, k_local: int, k_random: int,
                   seed=None, has_global: bool = True) -> EdgeSet:
    layout = chunk_blocks(n_tokens, block_size)
    rand = build_random_edges(layout, k_local, k_random, seed)
    return EdgeSet(layout, _radius(k_local), tuple(tuple(r) for r in rand), has_global)


def complete_edge_set(n_tokens: int, block_size: int | None = None) -> EdgeSet:
    """The dense graph expressed as an EdgeSet (every block sees every block)."""
    layout = chunk_blocks(n_tokens, block_size or n_tokens)
    return EdgeSet(layout, layout.n_blocks, tuple(() for _ in range(layout.n_blocks)),
                   True, complete=True)


def count_edges(edges: EdgeSet) -> int:
    """Exact directed token-level edge count (padding excluded, global included)."""
    sizes = edges.layout.block_sizes()
    total = 0
    for k in range(edges.layout.n_blocks):
        total += int(sizes[k]) * int(sizes[edges.neighbors(k)].sum())
    if edges.has_global:
        total += build_global_edges(edges.layout.n_tokens)
    return total


def enumerate_edges(edges: EdgeSet) -> int:
    """Brute-force pair enumeration; the oracle for :func:`count_edges`."""
    n = edges.layout.n_tokens
    g = edges.layout.block_size
    neigh = [set(edges.neighbors(k)) for k in range(edges.layout.n_blocks)]
    count = 0
    for i in range(n):
        bi = i // g
        for j in range(n):
            if j // g in neigh[bi]:
                count += 1
    if edges.has_global:
        count += 2 * n + 1
    return count


# ----------------------------------------------------------------------------
# token orders

SCHEMES = ("standard", "morton", "hilbert")


@dataclass(frozen=True)
class TokenOrder:
    scheme: str
    permutation: np.ndarray = field(repr=False)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv


def _morton_code(t: int, h: int, w: int, bits: int) -> int:
    # h is the least significant interleaved bit, then w, then t
    code = 0
    for b in range(bits):
        code |= ((h >> b) & 1) << (3 * b)
        code |= ((w >> b) & 1) << (3 * b + 1)
        code |= ((t >> b) & 1) << (3 * b + 2)
    return code


def _hilbert_d(n: int, x: int, y: int) -> int:
    """Distance of (x, y) along the Hilbert curve filling an n x n square (n a power of 2)."""
    d = 0
    s = n // 2
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        ry = 1 if (y & s) > 0 else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        s //= 2
    return d


def reorder_tokens(grid: tuple[int, int, int], scheme: str = "standard") -> TokenOrder:
    """Permutation over row-major (t, h, w) token indices; ``perm[i]`` is the token placed at i."""
    t_, h_, w_ = grid
    if min(grid) < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid}")
    n = t_ * h_ * w_
    if scheme == "standard":
        return TokenOrder(scheme, np.arange(n))
    coords = np.stack(np.unravel_index(np.arange(n), grid), axis=1)
    if scheme == "morton":
        bits = max(int(max(grid) - 1).bit_length(), 1)
        keys = [_morton_code(int(t), int(h), int(w), bits) for t, h, w in coords]
    elif scheme == "hilbert":
        side = 1
        while side < max(h_, w_):
            side *= 2
        keys = [int(t) * side * side + _hilbert_d(side, int(w), int(h)) for t, h, w in coords]
    else:
        raise ValueError(f"unsupported token order {scheme!r}; expected one of {SCHEMES}")
    return TokenOrder(scheme, np.argsort(np.asarray(keys), kind="stable"))
