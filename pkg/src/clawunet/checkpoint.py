"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CLAWCKPT1\\n"
    u64 config_length, config text (UTF-8 ``key=value`` lines)
    u64 tensor_count
    per tensor, in state-dict declaration order:
        u32 name_length, name (UTF-8)
        u32 rank, rank x u64 extents
        float32 values, row-major

Parameters and batchnorm running statistics are both stored, so an
eval-mode forward is reproduced bit-exactly after a round trip.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .model import ClawUNet, ModelConfig

MAGIC = b"CLAWCKPT1\n"


class CheckpointError(ValueError):
    pass


def to_bytes(model: ClawUNet) -> bytes:
    out = [MAGIC]
    cfg = model.config.to_text().encode("utf-8")
    out.append(struct.pack("<Q", len(cfg)))
    out.append(cfg)
    state = model.state_dict()
    out.append(struct.pack("<Q", len(state)))
    for name, t in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model: ClawUNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> ClawUNet:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a Claw UNet checkpoint")
    (cfg_len,) = r.unpack("<Q")
    try:
        config = ModelConfig.from_text(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    model = ClawUNet(config)
    state = model.state_dict()
    (count,) = r.unpack("<Q")
    if count != len(state):
        raise CheckpointError(f"checkpoint holds {count} tensors, model expects {len(state)}")
    loaded = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        if name not in state or tuple(state[name].shape) != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} {shape}")
        loaded[name] = torch.from_numpy(values.copy())
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    model.load_state_dict(loaded)
    return model


def load_checkpoint(path) -> ClawUNet:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    return from_bytes(path.read_bytes())
