"""CLS-query attention heatmaps from the last encoder block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PixelStats, resize_bilinear
from .encoder import Encoder


@dataclass
class Heatmap:
    grid: np.ndarray        # (gh, gw) raw head-averaged CLS->patch attention
    normalized: np.ndarray  # (gh, gw) min-max scaled to [0, 1]
    upsampled: np.ndarray   # (H, W)


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def attention_heatmap(encoder: Encoder, image: np.ndarray,
                      stats: PixelStats | None = None) -> Heatmap:
    """``image`` is a single (C, H, W) [0, 1] frame at the encoder resolution."""
    cfg = encoder.cfg
    image = np.asarray(image, dtype=np.float32)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match model input {expected}")
    if stats is not None:
        image = stats.apply(image)
    gh, gw = cfg.grid
    grid = encoder.last_layer_cls_attention(image[None])[0].reshape(gh, gw).astype(np.float64)
    norm = minmax(grid)
    up = resize_bilinear(norm[None], (0.0, 0.0, float(gw), float(gh)), cfg.image_size)[0]
    return Heatmap(grid, norm, np.clip(up, 0.0, 1.0))


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] heatmap (red-yellow ramp) over a [0, 1] RGB image."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    color = np.stack([np.ones_like(heat), heat, np.zeros_like(heat)])
    return (1 - alpha * heat) * img + alpha * heat * color
