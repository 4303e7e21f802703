"""Spatial and temporal pixel decoders.

The spatial decoder rebuilds masked patches of the current frame from its own
visible features. The temporal decoder rebuilds masked patches of the future
frame from the few visible future patches, conditioned on the current-frame
features. In ``self_cross`` mode that condition stream is projected once and
then only read (as keys/values) by every layer; ``joint_self`` concatenates both
streams and lets global self-attention update them together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as F
from .encoder import EncoderOutput
from .nn import Block, LayerNorm, Linear, Module, SelfCrossBlock
from .numerics import Tensor
from .patching import MaskingMap, sincos_posembed_2d

ARCHITECTURES = ("self_cross", "joint_self")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 8
    heads: int = 16
    dim: int = 512
    mlp_ratio: float = 4.0
    architecture: str = "self_cross"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"decoder dim {self.dim} not divisible by heads {self.heads}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown decoder architecture {self.architecture!r}")


@dataclass
class DecodedPrediction:
    """Pixel predictions (B, M, p*p*C) at the sorted masked indices (B, M)."""

    predictions: Tensor
    masked: np.ndarray


def _masked_indices(maps, batch: int) -> np.ndarray:
    if isinstance(maps, MaskingMap):
        maps = [maps]
    if len(maps) != batch:
        raise ValueError(f"{len(maps)} masking maps for a batch of {batch}")
    return np.stack([m.masked for m in maps]).reshape(batch, -1)


def _check_visible(enc: EncoderOutput, maps) -> None:
    if isinstance(maps, MaskingMap):
        maps = [maps]
    vis = np.stack([m.visible for m in maps]).reshape(len(maps), -1)
    if vis.shape != enc.visible.shape or not np.array_equal(vis, enc.visible):
        raise ValueError("encoder output was not produced under this masking map")


def assemble_decoder_input(enc: EncoderOutput, maps, embed: Linear, mask_token: Tensor,
                           pos: np.ndarray) -> Tensor:
    """Restore the full (B, 1 + N, D) grid: project encoder tokens, put the
    shared mask token at every masked slot, add positions to all patch slots."""
    _check_visible(enc, maps)
    x = embed(enc.tokens)
    B, _, D = x.shape
    n = pos.shape[0]
    full = F.scatter_rows(x[:, 1:], enc.visible, n, mask_token)
    full = full + Tensor(pos.astype(x.dtype))
    return F.concat([x[:, :1], full], axis=1)


class SpatialDecoder(Module):
    def __init__(self, cfg: DecoderConfig, enc_dim: int, grid: tuple[int, int], token_dim: int,
                 mask_token: Tensor, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(enc_dim, cfg.dim, rng)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, token_dim, rng)
        self._mask_token = mask_token
        self._pos = sincos_posembed_2d(*grid, cfg.dim)

    def forward(self, z_c: EncoderOutput, maps_c) -> DecodedPrediction:
        x = assemble_decoder_input(z_c, maps_c, self.embed, self._mask_token, self._pos)
        for blk in self.blocks:
            x = blk(x)
        masked = _masked_indices(maps_c, x.shape[0])
        pred = self.head(self.norm(x))
        return DecodedPrediction(F.take_rows(pred, masked + 1), masked)


class TemporalDecoder(Module):
    """Set ``trace`` to a list to record, per layer, the current-frame stream
    entering that layer (the cross-attention kv input in ``self_cross`` mode,
    the current-frame segment of the joint sequence in ``joint_self`` mode)."""

    def __init__(self, cfg: DecoderConfig, enc_dim: int, grid: tuple[int, int], token_dim: int,
                 mask_token: Tensor, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(enc_dim, cfg.dim, rng)
        self.cond_norm = LayerNorm(cfg.dim)
        block = SelfCrossBlock if cfg.architecture == "self_cross" else Block
        self.blocks = [block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, token_dim, rng)
        self._mask_token = mask_token
        self._pos = sincos_posembed_2d(*grid, cfg.dim)
        self.trace: list | None = None

    def condition(self, z_c: EncoderOutput) -> Tensor:
        """Project current-frame features once: embed, add positions of the
        visible patches (none for CLS), LayerNorm."""
        x = self.embed(z_c.tokens)
        pos = np.concatenate([np.zeros((1, self.cfg.dim)), self._pos]).astype(x.dtype)
        return self.cond_norm(x + Tensor(pos[np.pad(z_c.visible + 1, ((0, 0), (1, 0)))]))

    def forward(self, z_c: EncoderOutput, z_f: EncoderOutput, maps_f) -> DecodedPrediction:
        if self.cfg.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown decoder architecture {self.cfg.architecture!r}")
        cond = self.condition(z_c)
        q = assemble_decoder_input(z_f, maps_f, self.embed, self._mask_token, self._pos)
        if self.cfg.architecture == "self_cross":
            for blk in self.blocks:
                if self.trace is not None:
                    self.trace.append(cond)
                q = blk(q, cond)
        else:
            lc = cond.shape[1]
            seq = F.concat([cond, q], axis=1)
            for blk in self.blocks:
                if self.trace is not None:
                    self.trace.append(seq[:, :lc])
                seq = blk(seq)
            q = seq[:, lc:]
        masked = _masked_indices(maps_f, q.shape[0])
        pred = self.head(self.norm(q))
        return DecodedPrediction(F.take_rows(pred, masked + 1), masked)
