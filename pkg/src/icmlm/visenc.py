"""Trainable CNN producing a spatial feature grid, plus pooling utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import ContractViolation, image_tensor

PROBE_LAYERS = ("block2", "block3", "block4")


@dataclass
class FeatureGrid:
    X: torch.Tensor  # (H, W, d_x)
    layer_tag: str

    @property
    def grid_hw(self) -> tuple[int, int]:
        return int(self.X.shape[0]), int(self.X.shape[1])

    def flat(self) -> torch.Tensor:
        """(H*W, d_x) row-major flattening of the grid."""
        return self.X.reshape(-1, self.X.shape[-1])


class VisionBackbone(nn.Module):
    """Four conv blocks (3x3 conv, per-sample norm, ReLU, 2x avg-pool downsample).

    Blocks 1, 2 and 4 downsample; block 3 keeps resolution, so a 64x64 input
    yields block outputs 32x32, 16x16, 16x16 and a final 8x8 grid. Output
    sizes follow input_size / 8 for any input divisible by 8.
    """

    def __init__(self, widths=(32, 64, 128, 128), input_size: int = 64, in_channels: int = 3):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("expected 4 block widths")
        if input_size % 8 != 0 or input_size < 16:
            raise ValueError("input_size must be a multiple of 8 and at least 16")
        self.widths = tuple(widths)
        self.input_size = input_size
        chans = (in_channels,) + self.widths
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                nn.GroupNorm(1, chans[i + 1], eps=1e-5),
                nn.ReLU(),
            )
            for i in range(4)
        )
        self._downsample = (True, True, False, True)

    @property
    def d_x(self) -> int:
        return self.widths[-1]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.input_size // 8, self.input_size // 8

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """All block outputs for a (B, 3, H, W) batch, keyed block1..block4."""
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise ContractViolation(
                f"expected {self.input_size}x{self.input_size} input, got {tuple(x.shape[-2:])}"
            )
        out = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self._downsample[i]:
                x = F.avg_pool2d(x, 2)
            out[f"block{i + 1}"] = x
        return out

    def final_grid(self, x: torch.Tensor) -> torch.Tensor:
        """(B, H*W, d_x) flattened final grid, the fusion-head input."""
        feat = self.forward(x)["block4"]  # (B, C, h, w)
        b, c, h, w = feat.shape
        return feat.permute(0, 2, 3, 1).reshape(b, h * w, c)

    def encode_image(self, pixels: np.ndarray, layer_tag: str = "block4", want_intermediates: bool = False):
        """FeatureGrid for one image given as (H, W, 3) floats in [0, 1]."""
        x = image_tensor(pixels).to(next(self.parameters()).dtype)[None]
        with torch.no_grad():
            feats = self.forward(x)
        grids = {
            tag: FeatureGrid(X=f[0].permute(1, 2, 0).contiguous(), layer_tag=tag)
            for tag, f in feats.items()
        }
        return grids if want_intermediates else grids[layer_tag]


def pool_features(feat: torch.Tensor, mode: str, l2_normalize: bool = False) -> torch.Tensor:
    """Pool (B, C, H, W) feature maps to (B, D) vectors.

    global_average gives D = C; spatial_2x2_then_flatten averages into a 2x2
    grid and flattens to D = 4C.
    """
    if mode == "global_average":
        out = feat.mean(dim=(2, 3))
    elif mode == "spatial_2x2_then_flatten":
        out = F.adaptive_avg_pool2d(feat, 2).flatten(1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    if l2_normalize:
        out = out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return out


def pool(grid: FeatureGrid, mode: str, l2_normalize: bool = False) -> torch.Tensor:
    """Pool one FeatureGrid to a vector."""
    feat = grid.X.permute(2, 0, 1)[None]
    return pool_features(feat, mode, l2_normalize)[0]
