"""Flat tensor container: little-endian, per-tensor name + shape + float32 data."""

from __future__ import annotations

import struct

import numpy as np
import torch

MAGIC = b"ICWT"
FORMAT_VERSION = 1


def save_tensors(tensors: dict[str, torch.Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name in sorted(tensors):
            t = tensors[name].detach().cpu().contiguous().to(torch.float32)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape) if t.dim() else b"")
            data = t.numpy().astype("<f4").tobytes()
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def load_tensors(path) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: container version {version} unsupported")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            arr = np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(shape)
            out[name] = torch.from_numpy(arr.copy())
    return out
