"""Synthetic sprite-motion video corpus with templated captions.

Each clip shows one coloured sprite on a dark noisy background. It either
stays put or moves in one of four directions at one of two speeds. The
caption names colour and shape (appearance) and direction and speed
(motion), so half of the caption can only be recovered from frame order.

On disk: one PNG per clip holding all frames stacked vertically, plus a
``manifest.json`` with captions, token ids, labels and the split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .model import CLS_ID, MASK_ID, PAD_ID

COLORS = {
    "red": (230, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 240),
    "yellow": (235, 220, 40), "cyan": (40, 220, 220), "magenta": (220, 50, 210),
}
SHAPES = ("square", "circle", "triangle")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
SPEEDS = {"slowly": 0.7, "quickly": 1.4}      # pixels per source frame
MOTIONS = tuple((d, s) for d in DIRECTIONS for s in SPEEDS) + (("static", None),)

SPECIAL = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[MASK]": MASK_ID}
WORDS = ("the", "moves", "stays", "still", *COLORS, *SHAPES, *DIRECTIONS, *SPEEDS)
VOCAB = {**SPECIAL, **{w: i + len(SPECIAL) for i, w in enumerate(WORDS)}}
MOTION_WORDS = frozenset((*DIRECTIONS, *SPEEDS, "moves"))

SPRITE = 8
MANIFEST = "manifest.json"


def caption_for(color: str, shape: str, direction: str, speed: str | None) -> str:
    if direction == "static":
        return f"the {color} {shape} stays still"
    return f"the {color} {shape} moves {direction} {speed}"


def encode_caption(caption: str) -> list[int]:
    return [VOCAB[w] for w in caption.split()]


def decode_tokens(ids) -> str:
    inv = {v: k for k, v in VOCAB.items()}
    return " ".join(inv[int(i)] for i in ids if int(i) != PAD_ID)


def _sprite_mask(shape: str) -> np.ndarray:
    s = SPRITE
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    if shape == "square":
        return np.ones((s, s), bool)
    if shape == "circle":
        return (yy - s / 2) ** 2 + (xx - s / 2) ** 2 <= (s / 2) ** 2
    # upward-pointing triangle: half width grows by 1/2 px per row
    return np.abs(xx - s / 2) <= yy / 2


def render_clip(color: str, shape: str, direction: str, speed: str | None, n_frames: int,
                size: int, rng: np.random.Generator) -> np.ndarray:
    """(F, size, size, 3) uint8 frames."""
    travel = 0.0 if direction == "static" else SPEEDS[speed] * (n_frames - 1)
    dy, dx = DIRECTIONS.get(direction, (0, 0))
    room = size - SPRITE

    def start(delta):
        if delta > 0:
            return rng.uniform(0, room - travel)
        if delta < 0:
            return rng.uniform(travel, room)
        return rng.uniform(0, room)

    y0, x0 = start(dy), start(dx)
    step = 0.0 if direction == "static" else SPEEDS[speed]
    mask = _sprite_mask(shape)
    rgb = np.asarray(COLORS[color], dtype=np.float64)
    base = rng.integers(0, 40, size=(size, size, 3)).astype(np.float64)
    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for f in range(n_frames):
        img = base.copy()
        y = int(round(y0 + dy * step * f))
        x = int(round(x0 + dx * step * f))
        region = img[y:y + SPRITE, x:x + SPRITE]
        region[mask] = rgb
        frames[f] = np.clip(img, 0, 255).astype(np.uint8)
    return frames


@dataclass
class Corpus:
    root: Path
    frames: np.ndarray            # (n, F, H, W, 3) uint8
    tokens: list[list[int]]
    captions: list[str]
    records: list[dict]
    split: np.ndarray             # (n,) str

    def __len__(self) -> int:
        return len(self.tokens)

    def indices(self, split: str | None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        return np.flatnonzero(self.split == split)

    def motion_mask(self) -> np.ndarray:
        return np.array([r["direction"] != "static" for r in self.records])


def generate_corpus(out_dir, n_clips: int, n_frames: int = 16, seed: int = 0,
                    frame_size: int = 32, n_test: int | None = None) -> Path:
    """Write ``n_clips`` clips and a manifest; the last ``n_test`` clips form the test split."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    n_test = n_clips // 4 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    colors, records = list(COLORS), []
    for i in range(n_clips):
        color = colors[rng.integers(len(colors))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        direction, speed = MOTIONS[rng.integers(len(MOTIONS))]
        frames = render_clip(color, shape, direction, speed, n_frames, frame_size, rng)
        name = f"clips/{i:05d}.png"
        Image.fromarray(frames.reshape(n_frames * frame_size, frame_size, 3)).save(out / name)
        caption = caption_for(color, shape, direction, speed)
        records.append({"id": i, "file": name, "caption": caption,
                        "tokens": encode_caption(caption), "color": color, "shape": shape,
                        "direction": direction, "speed": speed,
                        "split": "test" if i >= n_clips - n_test else "train"})
    manifest = {"version": 1, "n_clips": n_clips, "frames": n_frames, "frame_size": frame_size,
                "seed": seed, "vocab": VOCAB, "clips": records}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    f, s = manifest["frames"], manifest["frame_size"]
    recs = manifest["clips"]
    frames = np.stack([np.asarray(Image.open(root / r["file"]).convert("RGB")).reshape(f, s, s, 3)
                       for r in recs])
    return Corpus(root, frames, [r["tokens"] for r in recs], [r["caption"] for r in recs], recs,
                  np.array([r["split"] for r in recs]))


def sample_frames(n_frames: int, t: int, rng=None) -> np.ndarray:
    """One index drawn uniformly from each of ``t`` contiguous chunks of ``n_frames``.

    With ``rng=None`` the middle frame of each chunk is used (evaluation).
    """
    if t < 1 or n_frames < t:
        raise ValueError(f"cannot sample {t} frames from {n_frames}")
    edges = (np.arange(t + 1) * n_frames) // t
    if rng is None:
        return (edges[:-1] + edges[1:] - 1) // 2
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return np.array([rng.integers(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])


def to_model_input(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> centred float32 in [-1, 1]."""
    return frames.astype(np.float32) / 127.5 - 1.0
