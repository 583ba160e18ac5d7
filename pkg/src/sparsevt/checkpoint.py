"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SVTT"  u32 version
    u32 len  UTF-8 JSON {"model": ModelConfig, "meta": {...}}
    u32 n_tensors
    n x [u32 name_len, name, u32 rank, rank x u64 dims, float32 payload (row-major)]
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, SparseVideoText
from . import autograd as ag

MAGIC = b"SVTT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SparseVideoText, meta: dict | None = None,
                   extra: dict[str, np.ndarray] | None = None) -> "Checkpoint":
        tensors = {k: np.array(p.data, copy=True) for k, p in model.params.items()}
        tensors.update(extra or {})
        return cls(model.cfg, tensors, dict(meta or {}))

    def model(self, dtype: str | None = None) -> SparseVideoText:
        cfg = self.config
        if dtype is not None and dtype != cfg.dtype:
            from dataclasses import replace
            cfg = replace(cfg, dtype=dtype)
        params = {k: ag.Parameter(v.astype(cfg.dtype), name=k)
                  for k, v in self.tensors.items() if not k.startswith("opt.")}
        return SparseVideoText(cfg, params)

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("opt.")}

    def to_bytes(self) -> bytes:
        header = json.dumps({"model": self.config.to_dict(), "meta": self.meta},
                            sort_keys=True).encode("utf-8")
        out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
               struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f4", order="C")  # keeps 0-d shape
            bname = name.encode("utf-8")
            out.append(struct.pack("<I", len(bname)))
            out.append(bname)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes(order="C"))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", buf, 8)
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        pos = 12 + hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last tensor")
        return cls(ModelConfig.from_dict(header["model"]), tensors, header.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
