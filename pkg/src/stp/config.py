"""Flat key=value run configuration shared by every command.

Resolution order (later wins): defaults, config file, ``STP_<KEY>`` environment
variables, command-line flags. Unknown keys are rejected at every layer.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .decoders import DecoderConfig
from .encoder import ENCODER_PRESETS
from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "STP_"

# keys that never change what a checkpoint contains
RUNTIME_KEYS = frozenset({
    "out", "threads", "checkpoint", "image", "probe_pairs", "probe_seed", "demos", "n_demos",
    "episodes", "base_seeds", "bc_epochs", "bc_lr", "history", "force",
})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    # data
    data: str = "synthetic"  # "synthetic" or a directory of frame folders
    n_clips: int = 500
    data_seed: int = 0
    interval: str = "16"
    augment: bool = True
    crop_min: float = 0.8
    # model
    decoder_arch: str = "self_cross"
    spatial_depth: int = 2
    temporal_depth: int = 2
    decoder_dim: int = 64
    decoder_heads: int = 4
    # optimisation
    steps: int = 1200
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 30
    weight_decay: float = 0.05
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    mask_current: float = 0.75
    mask_future: float = 0.95
    spatial_prediction: bool = True
    # downstream
    checkpoint: str = ""
    image: str = ""
    probe_pairs: int = 800
    probe_seed: int = 0
    demos: str = ""
    n_demos: int = 50
    episodes: int = 25
    base_seeds: str = "1000,2000,3000"
    bc_epochs: int = 100
    bc_lr: float = 1e-3
    history: int = 1
    force: bool = False

    def __post_init__(self):
        if self.preset not in ENCODER_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(ENCODER_PRESETS)}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived configs --

    def model_config(self) -> ModelConfig:
        dec = lambda depth: DecoderConfig(depth=depth, heads=self.decoder_heads,  # noqa: E731
                                          dim=self.decoder_dim, architecture=self.decoder_arch)
        return ModelConfig(encoder=ENCODER_PRESETS[self.preset],
                           spatial=dec(self.spatial_depth), temporal=dec(self.temporal_depth))

    def train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, total_steps=self.steps,
                           warmup_steps=min(self.warmup, self.steps), lambda_s=self.lambda_s,
                           lambda_t=self.lambda_t, mask_current=self.mask_current,
                           mask_future=self.mask_future,
                           spatial_prediction=self.spatial_prediction, interval=self.interval,
                           crop_scale=(self.crop_min, 1.0), augment=self.augment, seed=self.seed)

    def seeds(self) -> list[int]:
        return [int(s) for s in self.base_seeds.split(",") if s.strip()]

    # -- serialization --

    def items(self) -> list[tuple[str, object]]:
        return list(asdict(self).items())

    def echo(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    def digest(self) -> int:
        """64-bit digest over every key that shapes the checkpoint."""
        text = "".join(f"{k}={_format(v)}\n" for k, v in self.items() if k not in RUNTIME_KEYS)
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")

    def override(self, values: dict[str, str], source: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            k = key.strip().replace("-", "_")
            if k not in types:
                raise ConfigError(f"unknown key {key!r} in {source}")
            parsed[k] = _parse(raw, types[k], k, source)
        return replace(self, **parsed)


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse(raw, typ, key: str, source: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{source}: bad value {raw!r} for {key} ({typ})") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items() if k.startswith(ENV_PREFIX)}


def resolve(file: str | None = None, flags: dict[str, str] | None = None,
            environ=None) -> RunConfig:
    cfg = RunConfig()
    if file:
        cfg = cfg.override(read_config_file(file), str(file))
    cfg = cfg.override(env_overrides(environ), "environment")
    return cfg.override(flags or {}, "command line")
