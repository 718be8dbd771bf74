"""Small shared helpers: contract errors, checksums, deterministic batch order."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


class ContractViolation(ValueError):
    """An argument breaks a documented precondition."""


def image_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, 3) floats in [0, 1] to a (3, H, W) float32 tensor (copies; image
    records are read-only)."""
    return torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, in name order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_checksum(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Fixed shuffle for one pass over n items, derived from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, n: int, batch_size: int, step: int) -> np.ndarray:
    """Indices of the batch consumed at a given step.

    Stateless: position in the shuffled stream is step * batch_size, so a
    resumed run sees exactly the batches of an uninterrupted one.
    """
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    filled = 0
    while filled < batch_size:
        epoch, offset = divmod(start + filled, n)
        perm = epoch_permutation(seed, epoch, n)
        take = min(batch_size - filled, n - offset)
        out[filled : filled + take] = perm[offset : offset + take]
        filled += take
    return out
