"""Joint spatial + temporal pixel objective, AdamW, warmup-cosine schedule and
the pre-training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as F
from .data import ClipPair, IntervalPolicy, PixelStats, VideoClip, random_resized_crop_pair, \
    sample_frame_pair
from .decoders import DecodedPrediction
from .model import STPModel
from .numerics import NonFiniteError, Tensor
from .patching import MaskingMap, normalize_targets, patchify, sample_masking_map


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    batch_size: int = 32
    total_steps: int = 1000
    warmup_steps: int = 50
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    mask_current: float = 0.75
    mask_future: float = 0.95
    spatial_prediction: bool = True
    interval: str = "16"
    crop_scale: tuple[float, float] = (0.8, 1.0)
    augment: bool = True
    resample: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup steps must lie within the run")
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise ValueError("loss weights must be non-negative")
        IntervalPolicy.parse(self.interval)

    @classmethod
    def full_scale(cls, n_clips: int, **overrides) -> "TrainConfig":
        """Full-scale recipe: batch 4096, 50 epochs with 5 warmup epochs."""
        batch = 4096
        steps_per_epoch = max(1, math.ceil(n_clips / batch))
        base = dict(batch_size=batch, total_steps=50 * steps_per_epoch,
                    warmup_steps=5 * steps_per_epoch)
        base.update(overrides)
        return cls(**base)


# -- objective ---------------------------------------------------------------

def stp_loss(pred_c: DecodedPrediction | None, pred_f: DecodedPrediction,
             targets_c, targets_f, lambda_s: float = 1.0, lambda_t: float = 1.0,
             return_terms: bool = False):
    """lambda_s * MSE(current masked rows) + lambda_t * MSE(future masked rows).

    Each term averages over masked tokens and pixel dims; an empty term is 0.
    """
    def term(pred, target):
        if pred is None:
            return F.tensor(0.0, dtype=pred_f.predictions.dtype)
        p = pred.predictions
        target = np.asarray(target)
        if p.shape[:-1] != target.shape[:-1]:
            raise F.DimensionError(
                f"prediction rows {p.shape[:-1]} do not match target rows {target.shape[:-1]}")
        return F.mse_loss(p, target)

    ls = term(pred_c, targets_c)
    lt = term(pred_f, targets_f)
    total = ls * lambda_s + lt * lambda_t
    return (total, ls, lt) if return_terms else total


def lr_at(step: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine down to 0 at total_steps."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.base_lr
    progress = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, cfg: TrainConfig, decay_mask: Sequence[bool] | None = None) -> None:
    """One AdamW update in place. Weight decay multiplies the weights directly
    and is skipped where ``decay_mask`` is False; params with no grad are skipped."""
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        decay = cfg.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        w = p.data
        if decay:
            w = w * (1.0 - lr * decay)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = (w - lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)


class AdamW:
    """Holds moments for a fixed, ordered parameter list. Vectors (norm gains,
    biases, CLS and mask tokens) are excluded from weight decay."""

    def __init__(self, named_params, cfg: TrainConfig):
        named_params = list(named_params)
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.decay_mask = [p.ndim >= 2 for p in self.params]
        self.cfg = cfg
        self.state = AdamState.zeros_like(self.params)

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr, self.cfg,
                   self.decay_mask)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"adam/m/{name}"] = m
            out[f"adam/v/{name}"] = v
        out["adam/t"] = np.array(self.state.t, dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for i, name in enumerate(self.names):
            self.state.m[i] = tensors[f"adam/m/{name}"].astype(self.params[i].dtype)
            self.state.v[i] = tensors[f"adam/v/{name}"].astype(self.params[i].dtype)
        self.state.t = int(tensors["adam/t"])


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    current: np.ndarray  # (B, C, H, W) model inputs
    future: np.ndarray
    maps_c: list[MaskingMap]
    maps_f: list[MaskingMap]
    targets_c: np.ndarray  # (B, Mc, p*p*C) normalized pixels at masked slots
    targets_f: np.ndarray
    pairs: list[ClipPair] = field(default_factory=list)


def masked_targets(frames: np.ndarray, maps: list[MaskingMap], p: int) -> np.ndarray:
    tok = normalize_targets(patchify(frames, p).tokens)
    idx = np.stack([m.masked for m in maps]).reshape(len(maps), -1)
    return np.take_along_axis(tok, idx[:, :, None], axis=1)


def make_batch(pairs: list[ClipPair], n_tokens: int, patch_size: int, cfg: TrainConfig,
               rng: np.random.Generator, stats: PixelStats | None = None) -> Batch:
    maps_c = [sample_masking_map(n_tokens, cfg.mask_current, rng) for _ in pairs]
    maps_f = [sample_masking_map(n_tokens, cfg.mask_future, rng) for _ in pairs]
    cur = np.stack([pr.current for pr in pairs]).astype(np.float32)
    fut = np.stack([pr.future for pr in pairs]).astype(np.float32)
    stats = stats or PixelStats(mean=(0.0,) * cur.shape[1], std=(1.0,) * cur.shape[1])
    return Batch(stats.apply(cur), stats.apply(fut), maps_c, maps_f,
                 masked_targets(cur, maps_c, patch_size), masked_targets(fut, maps_f, patch_size),
                 pairs)


def sample_pairs(clips: Sequence[VideoClip], indices, cfg: TrainConfig,
                 rng: np.random.Generator) -> list[ClipPair]:
    pairs = []
    for i in indices:
        pair = sample_frame_pair(clips[i], cfg.interval, rng)
        if cfg.augment:
            pair = random_resized_crop_pair(pair, rng, cfg.crop_scale)
        pairs.append(pair)
    return pairs


def batch_for_step(clips: Sequence[VideoClip], step: int, cfg: TrainConfig, n_tokens: int,
                   patch_size: int, stats: PixelStats | None = None) -> Batch:
    """The batch at ``step`` depends only on (seed, step), so runs can resume anywhere.
    Clip order is reshuffled every epoch and frame pairs are resampled every step;
    with ``resample=False`` step 0's batch is reused throughout."""
    if not clips:
        raise ValueError("no clips to train on")
    s = step if cfg.resample else 0
    n = len(clips)
    per_epoch = max(1, n // cfg.batch_size)
    epoch, slot = divmod(s, per_epoch)
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n)
    idx = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
    rng = np.random.default_rng([cfg.seed, s, 2])
    return make_batch(sample_pairs(clips, idx, cfg, rng), n_tokens, patch_size, cfg, rng, stats)


# -- loop --------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    total: float
    spatial: float
    temporal: float
    lr: float


def compute_loss(model: STPModel, batch: Batch, cfg: TrainConfig):
    pred_c, pred_f = model(batch.current, batch.future, batch.maps_c, batch.maps_f,
                           spatial=cfg.spatial_prediction)
    return stp_loss(pred_c, pred_f, batch.targets_c, batch.targets_f,
                    cfg.lambda_s if cfg.spatial_prediction else 0.0, cfg.lambda_t,
                    return_terms=True)


def train_step(batch: Batch, model: STPModel, optimizer: AdamW, cfg: TrainConfig,
               step: int) -> StepRecord:
    optimizer.zero_grad()
    try:
        total, ls, lt = compute_loss(model, batch, cfg)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"step {step}: non-finite value in forward pass ({exc})") from exc
    if not np.isfinite(total.item()):
        raise TrainingDiverged(f"step {step}: loss is {total.item()}")
    F.backward(total)
    lr = lr_at(step, cfg)
    optimizer.step(lr)
    return StepRecord(step, total.item(), ls.item(), lt.item(), lr)


def pretrain(model: STPModel, clips: Sequence[VideoClip], cfg: TrainConfig,
             optimizer: AdamW | None = None, start_step: int = 0, stop_step: int | None = None,
             stats: PixelStats | None = None,
             on_step: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
    """Run steps [start_step, stop_step) of a ``cfg.total_steps`` schedule."""
    optimizer = optimizer or AdamW(model.named_parameters(), cfg)
    stop = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    enc = model.cfg.encoder
    records = []
    for step in range(start_step, stop):
        batch = batch_for_step(clips, step, cfg, enc.n_tokens, enc.patch_size, stats)
        rec = train_step(batch, model, optimizer, cfg, step)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return records
