"""Command-line driver.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .costmodel import cost_report, model_dims, base_dims, with_frames
from .curriculum import ExpansionSchedule, expand_checkpoint, validate_schedule
from .data import generate_corpus, load_corpus, sample_frames, to_model_input
from .evaluate import evaluate_retrieval, export_masks, temporal_probe
from .model import SparsityConfig
from .train import NumericalFailure, train_schedule, train_stage

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="run config JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _global_flags()
    parser = argparse.ArgumentParser(prog="sparsevt", parents=[flags],
                                     description="Sparse video-text transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[flags], help="write a synthetic clip corpus")
    p.add_argument("--n-clips", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", parents=[flags], help="train every stage of the schedule")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage", type=int, help="run only this stage index")
    p.add_argument("--init", type=Path, help="checkpoint to start or resume the stage from")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("expand", parents=[flags], help="expand a checkpoint to more frames")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--frames", type=int, required=True)

    for name, help_ in (("eval", "text-to-video retrieval"),
                        ("probe", "normal vs shuffled frame order retrieval")):
        p = sub.add_parser(name, parents=[flags], help=help_)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--split", default="test")
        if name == "probe":
            p.add_argument("--motion-only", action="store_true")

    p = sub.add_parser("cost", parents=[flags], help="edge / FLOP / memory accounting")
    p.add_argument("--paper-dims", dest="base_dims", action="store_true",
                   help="base-size model dimensions (224px, 16px patches, 768 wide, 12+3 layers)")
    p.add_argument("--frames", type=int)
    p.add_argument("--k-local", type=int)
    p.add_argument("--k-random", type=int, default=0)
    p.add_argument("--block-size", type=int, default=56)
    p.add_argument("--q-v", type=float, default=1.0)
    p.add_argument("--q-m", type=float, default=1.0)
    p.add_argument("--mode", choices=("formula", "exact"), default="formula")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--format", choices=("both", "json", "table"), default="both")

    p = sub.add_parser("export-masks", parents=[flags], help="keep-mask CSV for one clip")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--with-caption", action="store_true",
                   help="also export the multimodal prune site")

    p = sub.add_parser("validate-schedule", parents=[flags], help="check curriculum constraints")
    p.add_argument("schedule", type=Path, nargs="?",
                   help="schedule JSON (defaults to the config's schedule)")
    return parser


def _run_config(args) -> RunConfig:
    path = getattr(args, "config", None)
    return RunConfig.load(path) if path else RunConfig()


def _out(args, default: str = ".") -> Path:
    out = Path(getattr(args, "out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args, cfg: RunConfig):
    d = cfg.data
    root = generate_corpus(_out(args, "data"), args.n_clips or d.n_clips, args.frames or d.frames,
                           getattr(args, "seed", 0), d.frame_size,
                           d.n_test if args.n_test is None else args.n_test)
    print(root)


def cmd_train(args, cfg: RunConfig):
    corpus = load_corpus(args.data)
    seed, out = getattr(args, "seed", 0), _out(args, "runs")
    tcfg = cfg.train
    if args.max_steps is not None:
        tcfg = replace(tcfg, max_steps=args.max_steps)
    (out / "config.json").write_text(cfg.to_json())
    if args.stage is None:
        results = train_schedule(cfg.model, cfg.schedule, corpus, seed, out, tcfg)
    else:
        stage = cfg.schedule.stages[args.stage]
        init = Checkpoint.load(args.init) if args.init else None
        if init is not None and init.config.frames < stage.frames:
            init = expand_checkpoint(init, stage.frames, stage.sparsity)
        results = [train_stage(cfg.model, stage, corpus, init, seed, args.stage, out, tcfg)]
    for r in results:
        last = r.rows[-1] if r.rows else None
        print(f"{r.checkpoint_path}  steps={len(r.rows)}  last_loss={last[1] if last else 'n/a'}")


def cmd_expand(args, cfg: RunConfig):
    ckpt = Checkpoint.load(args.ckpt)
    sparsity = None
    for s in cfg.schedule.stages:
        if s.frames == args.frames:
            sparsity = s.sparsity
    new = expand_checkpoint(ckpt, args.frames, sparsity)
    print(new.save(_out(args) / f"expanded_T{args.frames}.svtt"))


def cmd_eval(args, cfg: RunConfig):
    model = Checkpoint.load(args.ckpt).model()
    res = evaluate_retrieval(model, load_corpus(args.data), args.split, getattr(args, "seed", 0))
    _print_json(res.to_dict())


def cmd_probe(args, cfg: RunConfig):
    model = Checkpoint.load(args.ckpt).model()
    res = temporal_probe(model, load_corpus(args.data), args.split, getattr(args, "seed", 0),
                         motion_only=args.motion_only)
    _print_json(res.to_dict())


def cmd_cost(args, cfg: RunConfig):
    if args.base_dims:
        dims = base_dims(args.frames or 4)
    else:
        dims = model_dims(cfg.model)
        if args.frames:
            dims = with_frames(dims, args.frames)
    sp = SparsityConfig(args.k_local, args.k_random, args.block_size, args.q_v, args.q_m)
    report = cost_report(sp, dims, args.mode, getattr(args, "seed", 0), args.batch)
    if args.format in ("table", "both"):
        print(report.table())
    if args.format in ("json", "both"):
        print(report.to_json())


def cmd_export_masks(args, cfg: RunConfig):
    model = Checkpoint.load(args.ckpt).model()
    corpus = load_corpus(args.data)
    if not 0 <= args.clip < len(corpus):
        raise ValueError(f"clip index {args.clip} out of range")
    sel = sample_frames(corpus.frames.shape[1], model.cfg.frames)
    clip = to_model_input(corpus.frames[args.clip][sel])
    caption = corpus.tokens[args.clip] if args.with_caption else None
    path = _out(args) / f"masks_clip{args.clip}.csv"
    export_masks(model, clip, path, caption, getattr(args, "seed", 0))
    print(path)


def cmd_validate_schedule(args, cfg: RunConfig):
    schedule = ExpansionSchedule.load(args.schedule) if args.schedule else cfg.schedule
    bad = validate_schedule(schedule)
    if bad:
        print(json.dumps([v.to_dict() for v in bad]), file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "expand": cmd_expand, "eval": cmd_eval,
    "probe": cmd_probe, "cost": cmd_cost, "export-masks": cmd_export_masks,
    "validate-schedule": cmd_validate_schedule,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _run_config(args)
        code = COMMANDS[args.command](args, cfg)
    except NumericalFailure as exc:
        where = f" (last good checkpoint: {exc.checkpoint_path})" if exc.checkpoint_path else ""
        print(f"numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"invalid configuration or input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
