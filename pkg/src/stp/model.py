"""Full pre-training model: one shared frame encoder and the two decoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as F
from .decoders import DecodedPrediction, DecoderConfig, SpatialDecoder, TemporalDecoder
from .encoder import ENCODER_PRESETS, Encoder, EncoderConfig
from .nn import Module


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    spatial: DecoderConfig = field(default_factory=lambda: DecoderConfig(2, 4, 64))
    temporal: DecoderConfig = field(default_factory=lambda: DecoderConfig(2, 4, 64))

    def __post_init__(self):
        if self.spatial.dim != self.temporal.dim:
            raise ValueError("spatial and temporal decoders share the mask token, "
                             "so their dims must match")


MODEL_PRESETS = {
    "tiny": ModelConfig(),
    "vit-b16": ModelConfig(ENCODER_PRESETS["vit-b16"], DecoderConfig(), DecoderConfig()),
}


class STPModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        enc = cfg.encoder
        self.encoder = Encoder(enc, rng)
        self.mask_token = F.parameter(rng.normal(0.0, 0.02, size=cfg.spatial.dim))
        self.spatial = SpatialDecoder(cfg.spatial, enc.dim, enc.grid, enc.token_dim,
                                      self.mask_token, rng)
        self.temporal = TemporalDecoder(cfg.temporal, enc.dim, enc.grid, enc.token_dim,
                                        self.mask_token, rng)

    def forward(self, current, future, maps_c, maps_f, spatial: bool = True
                ) -> tuple[DecodedPrediction | None, DecodedPrediction]:
        """Encode both frames with the same encoder, then decode both streams."""
        z_c = self.encoder.encode(current, maps_c)
        z_f = self.encoder.encode(future, maps_f)
        pred_c = self.spatial(z_c, maps_c) if spatial else None
        pred_f = self.temporal(z_c, z_f, maps_f)
        return pred_c, pred_f
