"""Training loop for one curriculum stage, and the multi-stage driver.

Every random draw in a step (batch order, frame sampling, random edges, VTM
negatives, MLM masks) comes from a generator seeded by ``(seed, stage, step)``,
so a run resumed from a checkpoint replays exactly the same trajectory.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint
from .curriculum import ExpansionSchedule, Stage, expand_checkpoint, stage_config, validate_schedule
from .data import Corpus, sample_frames, to_model_input
from .model import ModelConfig, SparseVideoText
from .objectives import TAU_RANGE, make_mask_plan, mlm_loss, total_loss, vtc_loss, vtm_loss_from_logits
from .pruning import TokenSequence

METRIC_HEADER = ("step", "loss_total", "loss_vtc", "loss_vtm", "loss_mlm", "lr")


class NumericalFailure(FloatingPointError):
    """Raised when a loss or gradient goes non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    warmup_frac: float = 0.1
    min_lr_ratio: float = 0.05
    weight_decay: float = 0.02
    mask_prob: float = 0.15
    max_steps: int | None = None      # truncate a stage (tests, smoke runs)
    checkpoint_every: int = 0


@dataclass
class StageResult:
    checkpoint: Checkpoint
    rows: list[tuple]
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def _fmt(x: float) -> str:
    return f"{x:.8g}"


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_HEADER)
    for step, *vals in rows:
        writer.writerow([step, *(_fmt(v) for v in vals)])
    return buf.getvalue()


def batch_losses(model: SparseVideoText, clips: np.ndarray, captions, rng: np.random.Generator,
                 mask_prob: float = 0.15):
    """(total, vtc, vtm, mlm) Tensors for one batch; record under a Tape to train."""
    vo = model.encode_video(clips, rng)
    ids, _ = model.text_inputs(captions)
    text = model.encode_text(ids)
    tau = ag.exp(model.params["log_tau"])
    vtc = vtc_loss(vo.embedding, text.embedding, tau)

    b = ids.shape[0]
    fused = model.multimodal(vo.tokens, text)
    if b > 1:
        neg = (np.arange(b) + rng.integers(1, b, size=b)) % b
        tok = vo.tokens
        neg_video = TokenSequence(ag.take(tok.embeddings, neg, axis=0), tok.coords[neg],
                                  tok.orig_index[neg], tok.n_original)
        neg_logit = model.vtm_logit(model.multimodal(neg_video, text))
    else:
        neg_logit = np.zeros(0, dtype=np.float32)
    vtm = vtm_loss_from_logits(model.vtm_logit(fused), neg_logit)

    masked, plan = make_mask_plan(ids, rng, mask_prob)
    mm = model.multimodal(vo.tokens, model.encode_text(masked))
    mlm = mlm_loss(model.mlm_logits(mm), plan)
    return total_loss(vtc, vtm, mlm), vtc, vtm, mlm


def _clamp_tau(model: SparseVideoText):
    lo, hi = np.log(TAU_RANGE[0]), np.log(TAU_RANGE[1])
    p = model.params["log_tau"]
    np.clip(p.data, lo, hi, out=p.data)


def stage_steps(stage: Stage, n_train: int, tcfg: TrainConfig) -> tuple[int, int]:
    per_epoch = max(n_train // stage.batch, 1)
    total = per_epoch * stage.epochs
    if tcfg.max_steps is not None:
        total = min(total, tcfg.max_steps)
    return per_epoch, total


def train_stage(model_cfg: ModelConfig, stage: Stage, corpus: Corpus,
                ckpt_in: Checkpoint | None = None, seed: int = 0, stage_index: int = 0,
                out_dir=None, tcfg: TrainConfig = TrainConfig()) -> StageResult:
    """Optimise all objectives over the train split for ``stage.epochs`` epochs.

    ``ckpt_in`` whose metadata names the same stage and an unfinished step
    count is resumed (optimizer moments included); otherwise its weights
    initialise a fresh optimizer.
    """
    cfg = stage_config(model_cfg, stage)
    if ckpt_in is None:
        model = SparseVideoText(cfg, seed=seed)
        meta, opt_state = {"stage": stage_index}, {}
    else:
        if ckpt_in.config.frames != stage.frames:
            raise ValueError(f"checkpoint has T={ckpt_in.config.frames}, stage wants {stage.frames}")
        ck = replace(ckpt_in, config=replace(ckpt_in.config, sparsity=stage.sparsity))
        model = ck.model()
        meta, opt_state = dict(ckpt_in.meta), ckpt_in.optimizer_state()
    train_idx = corpus.indices("train")
    per_epoch, total = stage_steps(stage, len(train_idx), tcfg)
    start = 0
    if meta.get("stage_index") == stage_index and 0 < meta.get("step", 0) < total:
        start = int(meta["step"])
    else:
        opt_state = {}
    opt = ag.AdamW([model.params[k] for k in sorted(model.params)],
                   weight_decay=tcfg.weight_decay)
    opt.load_state_tensors(opt_state)
    warmup = int(math.ceil(tcfg.warmup_frac * total))
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []

    def snapshot(step: int) -> Checkpoint:
        m = {**meta, "stage": stage_index, "stage_index": stage_index, "step": step,
             "total_steps": total, "frames": stage.frames, "seed": seed}
        return Checkpoint.from_model(model, m, extra=opt.state_tensors())

    last_good = None
    for step in range(start, total):
        epoch, k = divmod(step, per_epoch)
        order = np.random.default_rng([seed, stage_index, epoch]).permutation(train_idx)
        batch = order[k * stage.batch:(k + 1) * stage.batch]
        rng = np.random.default_rng([seed, stage_index, 1 << 20, step])
        frames = np.stack([corpus.frames[i][sample_frames(corpus.frames.shape[1], stage.frames, rng)]
                           for i in batch])
        clips = to_model_input(frames)
        caps = [corpus.tokens[i] for i in batch]
        lr = ag.cosine_lr(step, total, stage.lr, warmup, tcfg.min_lr_ratio)

        opt.zero_grad()
        with ag.Tape() as tape:
            loss, vtc, vtm, mlm = batch_losses(model, clips, caps, rng, tcfg.mask_prob)
        vals = [float(loss.data), float(vtc.data), float(vtm.data), float(mlm.data)]
        try:
            if not all(np.isfinite(vals)):
                raise ag.NonFiniteGradient(f"non-finite loss at step {step}: {vals}")
            tape.backward(loss)
            opt.step(lr)
        except (ag.NonFiniteGradient, ag.GradientError) as exc:
            path = None
            if out_dir is not None:
                path = (last_good or snapshot(step)).save(out_dir / f"stage{stage_index}_last_good.svtt")
            raise NumericalFailure(str(exc), path) from exc
        _clamp_tau(model)
        rows.append((step, *vals, lr))
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            last_good = snapshot(step + 1)
            if out_dir is not None:
                last_good.save(out_dir / f"stage{stage_index}_step{step + 1}.svtt")

    final = snapshot(total)
    result = StageResult(final, rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = final.save(out_dir / f"stage{stage_index}.svtt")
        result.metrics_path = out_dir / f"metrics_stage{stage_index}.csv"
        result.metrics_path.write_text(metrics_csv(rows))
    return result


def train_schedule(model_cfg: ModelConfig, schedule: ExpansionSchedule, corpus: Corpus,
                   seed: int = 0, out_dir=None, tcfg: TrainConfig = TrainConfig(),
                   check: bool = True) -> list[StageResult]:
    """Train stage 0, expand to the next clip length, train again, and so on."""
    if check:
        bad = validate_schedule(schedule)
        if bad:
            raise ValueError("invalid schedule: " + "; ".join(v.constraint for v in bad))
    results, ckpt = [], None
    for j, stage in enumerate(schedule.stages):
        if ckpt is not None:
            ckpt = expand_checkpoint(ckpt, stage.frames, stage.sparsity)
        res = train_stage(model_cfg, stage, corpus, ckpt, seed, j, out_dir, tcfg)
        results.append(res)
        ckpt = res.checkpoint
    return results
