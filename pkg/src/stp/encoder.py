"""Plain ViT frame encoder that only sees visible patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as F
from .nn import Block, LayerNorm, Linear, Module
from .numerics import Tensor
from .patching import MaskingMap, patchify, sincos_posembed_2d


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"encoder dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def token_dim(self) -> int:
        return self.patch_size ** 2 * self.channels


ENCODER_PRESETS = {
    "tiny": EncoderConfig(),
    "vit-b16": EncoderConfig(image_size=224, patch_size=16, dim=768, depth=12, heads=12),
}


@dataclass
class EncoderOutput:
    """Encoder features for a batch: ``tokens`` is (B, 1 + V, d), CLS first."""

    tokens: Tensor
    visible: np.ndarray  # (B, V) sorted patch indices

    @property
    def cls(self) -> Tensor:
        return self.tokens[:, 0]

    @property
    def patch_tokens(self) -> Tensor:
        return self.tokens[:, 1:]


def _batched_visible(maps, batch: int, n: int) -> np.ndarray:
    if maps is None:
        return np.tile(np.arange(n), (batch, 1))
    if isinstance(maps, MaskingMap):
        maps = [maps]
    if len(maps) != batch:
        raise ValueError(f"{len(maps)} masking maps for a batch of {batch}")
    for m in maps:
        if m.n_tokens != n:
            raise ValueError(f"masking map covers {m.n_tokens} tokens, image has {n}")
    return np.stack([m.visible for m in maps])


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.token_dim, cfg.dim, rng)
        self.cls_token = F.parameter(rng.normal(0.0, 0.02, size=cfg.dim))
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self._pos = sincos_posembed_2d(*cfg.grid, cfg.dim)

    def _images(self, images) -> np.ndarray:
        arr = np.asarray(images.data if isinstance(images, Tensor) else images)
        if arr.ndim == 3:
            arr = arr[None]
        c = self.cfg
        if arr.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ValueError(
                f"image shape {arr.shape[1:]} does not match config "
                f"({c.channels}, {c.image_size}, {c.image_size})")
        return arr.astype(self.patch_embed.weight.dtype, copy=False)

    def embed(self, images, maps=None) -> tuple[Tensor, np.ndarray]:
        """Project patches, add positions to every patch, keep only visible ones,
        then prepend CLS. Returns the (B, 1 + V, d) sequence and visible indices."""
        arr = self._images(images)
        B = arr.shape[0]
        visible = _batched_visible(maps, B, self.cfg.n_tokens)
        # Masked patches are dropped before projection; only visible pixels enter the graph.
        tok = patchify(arr, self.cfg.patch_size).tokens
        tok = np.take_along_axis(tok, visible[:, :, None], axis=1)
        pos = self._pos.astype(tok.dtype)[visible]
        x = self.patch_embed(Tensor(tok)) + Tensor(pos)
        cls = F.reshape(self.cls_token, (1, 1, self.cfg.dim))
        cls = cls + Tensor(np.zeros((B, 1, self.cfg.dim), dtype=tok.dtype))
        return F.concat([cls, x], axis=1), visible

    def encode(self, images, maps=None) -> EncoderOutput:
        x, visible = self.embed(images, maps)
        for blk in self.blocks:
            x = blk(x)
        return EncoderOutput(self.norm(x), visible)

    forward = encode

    def encode_full(self, images) -> EncoderOutput:
        """Inference-mode encoding with nothing masked."""
        return self.encode(images, None)

    def last_layer_cls_attention(self, images) -> np.ndarray:
        """Head-averaged attention of CLS over the patch tokens in the final
        block, shape (B, N), for unmasked inputs."""
        attn = self.blocks[-1].attn
        attn.record = True
        try:
            with F.no_grad():
                self.encode_full(images)
            w = attn.last_weights
        finally:
            attn.record = False
            attn.last_weights = None
        return w[:, :, 0, 1:].mean(axis=1)


def cls_feature(out: EncoderOutput) -> np.ndarray:
    """CLS rows of an encoder output as a (B, d) array."""
    return out.tokens.data[:, 0]
