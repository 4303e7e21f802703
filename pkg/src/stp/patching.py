"""Image <-> patch tokens, per-patch target normalization, fixed 2D sin-cos
position embeddings and random masking maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor

NORM_EPS = 1e-6


@dataclass(frozen=True)
class PatchTokens:
    """Tokens of shape (..., N, p*p*C) laid out row-major over a (gh, gw) grid.

    Each token is the p x p x C block flattened in (row, col, channel) order.
    """

    tokens: np.ndarray
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image, p: int) -> PatchTokens:
    """Split (C, H, W) or (B, C, H, W) images into non-overlapping p x p patches."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (B,C,H,W) image, got shape {arr.shape}")
    *lead, C, H, W = arr.shape
    if H % p or W % p:
        raise ValueError(f"image H={H}, W={W} not divisible by patch size p={p}")
    gh, gw = H // p, W // p
    x = arr.reshape(*lead, C, gh, p, gw, p)
    x = np.moveaxis(x, -5, -1)  # (..., gh, p, gw, p, C)
    x = np.swapaxes(x, -4, -3)  # (..., gh, gw, p, p, C)
    tokens = np.ascontiguousarray(x).reshape(*lead, gh * gw, p * p * C)
    return PatchTokens(tokens, (gh, gw), p, C)


def unpatchify(pt: PatchTokens) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    gh, gw = pt.grid
    p, C = pt.patch_size, pt.channels
    t = np.asarray(pt.tokens)
    if t.shape[-1] != p * p * C or t.shape[-2] != gh * gw:
        raise ValueError(
            f"token shape {t.shape} does not match grid {pt.grid}, p={p}, C={C}")
    lead = t.shape[:-2]
    x = t.reshape(*lead, gh, gw, p, p, C)
    x = np.swapaxes(x, -4, -3)  # (..., gh, p, gw, p, C)
    x = np.moveaxis(x, -1, -5)  # (..., C, gh, p, gw, p)
    return np.ascontiguousarray(x).reshape(*lead, C, gh * p, gw * p)


def normalize_targets(tokens, eps: float = NORM_EPS) -> np.ndarray:
    """Standardize each patch row to zero mean and unit variance.

    ``(x - mean) / sqrt(var + eps)`` per row; constant patches map to zeros.
    Regression targets only, never a model input.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t = tokens.tokens if isinstance(tokens, PatchTokens) else np.asarray(tokens)
    t = t.astype(np.float64)
    mu = t.mean(axis=-1, keepdims=True)
    var = t.var(axis=-1, keepdims=True)
    return (t - mu) / np.sqrt(var + eps)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_posembed_2d(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed (gh*gw, dim) embedding; first half encodes the row, second half
    the column, each as [sin | cos] over a base-10000 geometric ladder."""
    if dim % 4:
        raise ValueError(f"embedding dim {dim} must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64),
                             np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)


def masked_count(n: int, ratio: float) -> int:
    """round(ratio * n) with ties rounded up."""
    return int(math.floor(round(ratio * n, 9) + 0.5))


@dataclass(frozen=True)
class MaskingMap:
    n_tokens: int
    ratio: float
    masked: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        if len(self.masked) + len(self.visible) != self.n_tokens:
            raise ValueError("masked and visible sets must partition the tokens")

    @classmethod
    def from_masked(cls, n: int, ratio: float, masked) -> "MaskingMap":
        masked = np.sort(np.asarray(masked, dtype=np.int64))
        keep = np.ones(n, dtype=bool)
        keep[masked] = False
        return cls(n, ratio, masked, np.flatnonzero(keep).astype(np.int64))

    @classmethod
    def empty(cls, n: int) -> "MaskingMap":
        return cls.from_masked(n, 0.0, np.empty(0, dtype=np.int64))


def sample_masking_map(n: int, ratio: float, rng: np.random.Generator) -> MaskingMap:
    """Uniformly random masked subset of size round(ratio * n), without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {ratio}")
    k = masked_count(n, ratio)
    return MaskingMap.from_masked(n, ratio, rng.permutation(n)[:k])


def stack_maps(maps: list[MaskingMap]) -> tuple[np.ndarray, np.ndarray]:
    """(B, V) visible and (B, M) masked index arrays for a batch of equal-ratio maps."""
    return (np.stack([m.visible for m in maps]), np.stack([m.masked for m in maps]))
