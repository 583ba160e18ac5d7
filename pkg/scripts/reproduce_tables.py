"""Print edge counts, stage sparsity, FLOPs and memory at base-size dimensions."""
import argparse

from sparsevt.costmodel import (edge_profile, flops_estimate, memory_estimate, base_dims,
                                sparsity_fraction)
from sparsevt.curriculum import BASE_SCHEDULE
from sparsevt.model import SparsityConfig

EDGE_CONFIGS = [
    ("dense", SparsityConfig()),
    ("edge (1,3,56)", SparsityConfig(1, 3, 56)),
    ("edge (1,5,56)", SparsityConfig(1, 5, 56)),
    ("node (0.7,0.1)", SparsityConfig(q_v=0.7, q_m=0.1)),
    ("node (0.7,1.0)", SparsityConfig(q_v=0.7)),
    ("hybrid (1,3,56)+(0.7,0.1)", SparsityConfig(1, 3, 56, q_v=0.7, q_m=0.1)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mode", choices=("formula", "exact"), default="formula",
                    help="closed-form per-token counts or exact block enumeration")
    args = ap.parse_args()

    print("edges at T=4")
    for name, sp in EDGE_CONFIGS:
        print(f"  {name:<28}{edge_profile(sp, base_dims(4), args.mode).total / 1e6:>8.3f}M")

    print("\nstage sparsity")
    for st in BASE_SCHEDULE.stages:
        s = sparsity_fraction(st.sparsity, base_dims(st.frames), args.mode)
        print(f"  T={st.frames:<3} q_v={st.q_v:<4} q_m={st.q_m:<4} S={float(s):.4f}")

    print("\nvideo encoder GFLOPs / activation MB per clip")
    rows = [("dense", {t: SparsityConfig() for t in (4, 8, 16)}),
            ("edge (1,3,56)", {t: SparsityConfig(1, 3, 56) for t in (4, 8, 16)}),
            ("node", {4: SparsityConfig(q_v=0.7, q_m=0.1), 8: SparsityConfig(q_v=0.7, q_m=0.1),
                      16: SparsityConfig(q_v=0.6, q_m=0.1)}),
            ("hybrid", {st.frames: st.sparsity for st in BASE_SCHEDULE.stages})]
    print(f"  {'':<16}" + "".join(f"{'T=' + str(t):>20}" for t in (4, 8, 16)))
    for name, per_t in rows:
        cells = []
        for t in (4, 8, 16):
            dims = base_dims(t)
            g = flops_estimate(per_t[t], dims, args.mode)
            mb = memory_estimate(per_t[t], dims, 1, args.mode) / 2**20
            cells.append(f"{g:8.1f} / {mb:7.0f}")
        print(f"  {name:<16}" + "".join(f"{c:>20}" for c in cells))


if __name__ == "__main__":
    main()
