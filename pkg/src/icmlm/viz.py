"""Attention heatmap overlays: PNG render plus a raw-probability JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .fusion import AttentionMap

# Colormap: pixels blend linearly toward dark red with the cell's attention,
# scaled so the peak cell is fully saturated (darker red = stronger attention).
_DARK_RED = np.array([0.55, 0.0, 0.0])
_BLEND = 0.65


def render_attention_overlay(pixels: np.ndarray, p: np.ndarray) -> np.ndarray:
    """(H, W, 3) image and (gh, gw) cell probabilities to an overlay image."""
    p = np.asarray(p, dtype=np.float64)
    h, w = pixels.shape[:2]
    gh, gw = p.shape
    if h % gh or w % gw:
        raise ValueError(f"grid {p.shape} does not tile image {pixels.shape[:2]}")
    heat = np.kron(p / max(p.max(), 1e-12), np.ones((h // gh, w // gw)))
    alpha = (_BLEND * heat)[..., None]
    return (1.0 - alpha) * pixels + alpha * _DARK_RED


def save_attention_artifacts(amap: AttentionMap, pixels: np.ndarray, out_dir, stem: str):
    """Write <stem>.png and <stem>.json for one attention map; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(amap.p.detach().cpu().numpy() if hasattr(amap.p, "detach") else amap.p,
                      dtype=np.float64)
    overlay = render_attention_overlay(pixels, grid)
    png_path = out / f"{stem}.png"
    Image.fromarray(np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(png_path)
    json_path = out / f"{stem}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({
            "image_id": amap.image_id,
            "caption_id": amap.caption_id,
            "mask_index": amap.mask_index,
            "grid": [[float(v) for v in row] for row in grid],
        }, fh, indent=2)
    return png_path, json_path
