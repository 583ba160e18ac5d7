"""How edge count and sparsity grow with clip length for fixed edge parameters.

Shows that the per-token neighbourhood (K_l + K_r) * G stays fixed, so the
edge count grows linearly in T while the dense count grows quadratically.
"""
import argparse

from sparsevt.costmodel import dense_edges, edge_profile, base_dims, sparsity_fraction
from sparsevt.model import SparsityConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k-local", type=int, default=1)
    ap.add_argument("--k-random", type=int, default=3)
    ap.add_argument("--block-size", type=int, default=56)
    ap.add_argument("--q-v", type=float, default=1.0)
    ap.add_argument("--q-m", type=float, default=1.0)
    args = ap.parse_args()
    sp = SparsityConfig(args.k_local, args.k_random, args.block_size, args.q_v, args.q_m)
    print(f"{'T':>4}{'dense edges':>16}{'sparse edges':>16}{'S':>9}")
    for t in (1, 2, 4, 8, 16, 32, 64):
        dims = base_dims(t)
        e = edge_profile(sp, dims).total
        print(f"{t:>4}{dense_edges(dims):>16,}{e:>16,}{float(sparsity_fraction(sp, dims)):>9.4f}")


if __name__ == "__main__":
    main()
