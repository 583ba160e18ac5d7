"""Generate the synthetic corpus, run the default two-stage curriculum, then evaluate.

Writes checkpoints and metric CSVs under --out and prints retrieval and
temporal-probe results after every stage.
"""
import argparse
import json
import time
from pathlib import Path

from sparsevt.config import RunConfig
from sparsevt.curriculum import expand_checkpoint
from sparsevt.data import generate_corpus, load_corpus
from sparsevt.evaluate import evaluate_retrieval, temporal_probe
from sparsevt.train import train_stage


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, help="run config JSON (defaults built in)")
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    data_dir = args.out / "corpus"
    if not (data_dir / "manifest.json").exists():
        d = cfg.data
        generate_corpus(data_dir, d.n_clips, d.frames, args.data_seed, d.frame_size, d.n_test)
    corpus = load_corpus(data_dir)
    (args.out / "config.json").write_text(cfg.to_json())

    ckpt, t0 = None, time.time()
    for j, stage in enumerate(cfg.schedule.stages):
        if ckpt is not None:
            ckpt = expand_checkpoint(ckpt, stage.frames, stage.sparsity)
        res = train_stage(cfg.model, stage, corpus, ckpt, args.seed, j, args.out, cfg.train)
        ckpt = res.checkpoint
        model = ckpt.model()
        summary = {
            "stage": j, "frames": stage.frames, "minutes": round((time.time() - t0) / 60, 2),
            "final_loss": res.rows[-1][1] if res.rows else None,
            "test": evaluate_retrieval(model, corpus, "test", args.seed).to_dict(),
            "probe": temporal_probe(model, corpus, "test", args.seed).to_dict(),
            "probe_motion": temporal_probe(model, corpus, "test", args.seed, motion_only=True).to_dict(),
        }
        print(json.dumps(summary, indent=1), flush=True)


if __name__ == "__main__":
    main()
