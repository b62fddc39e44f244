"""Binary checkpoint format.

Little-endian layout::

    b"FHDB1"
    u32 entry count
    per entry: u32 name length, utf-8 name, u32 rank, u64 dims[rank],
               float64 payload (row-major)

Model configuration values are stored as rank-0 entries named ``config.<key>``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .network import DualBranchDenoiser, ModelConfig

MAGIC = b"FHDB1"


class CheckpointError(RuntimeError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            b = name.encode("utf-8")
            f.write(struct.pack("<I", len(b)))
            f.write(b)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    buf = path.read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint header")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = buf[pos: pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        if pos + 8 * size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return out


def save_checkpoint(path, model: DualBranchDenoiser, extra: dict[str, float] | None = None) -> None:
    tensors = {f"config.{k}": np.array(float(v)) for k, v in model.cfg.to_dict().items()}
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.array(float(v))
    for k, v in model.state_dict().items():
        tensors[f"param.{k}"] = v.detach().cpu().double().numpy()
    write_tensors(path, tensors)


def load_checkpoint(path, dtype=torch.float32) -> tuple[DualBranchDenoiser, dict[str, float]]:
    tensors = read_tensors(path)
    kw = {}
    for name, fld in ModelConfig.__dataclass_fields__.items():
        key = f"config.{name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
        v = tensors[key].item()
        kw[name] = int(v) if fld.type in ("int", int) else float(v)
    model = DualBranchDenoiser(ModelConfig(**kw)).to(dtype)
    state = {k[len("param."):]: torch.from_numpy(v).to(dtype) for k, v in tensors.items() if k.startswith("param.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameter mismatch: {e}") from e
    extra = {k[len("extra."):]: float(v.item()) for k, v in tensors.items() if k.startswith("extra.")}
    model.eval()
    return model, extra
