"""Video clip sources, frame-pair sampling and paired augmentation."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm")


@dataclass
class VideoClip:
    """``frames`` is (T, C, H, W) float32 in [0, 1]. ``positions`` holds sprite
    centres (T, S, 2) as (x, y) in continuous pixel coordinates."""

    frames: np.ndarray
    fps: float = 30.0
    positions: np.ndarray | None = None
    velocities: np.ndarray | None = None

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (T, C, H, W), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError("a clip needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class ClipPair:
    current: np.ndarray
    future: np.ndarray
    interval: int
    current_index: int = 0
    displacement: np.ndarray | None = None  # (S, 2), synthetic clips only
    crop: tuple[float, float, float, float] | None = None  # x0, y0, w, h in source pixels


@dataclass(frozen=True)
class SpriteParams:
    n_sprites: tuple[int, int] = (1, 2)
    speed: tuple[float, float] = (0.3, 1.0)  # pixels per frame
    length: int = 32
    size: int = 32
    radius: tuple[float, float] = (3.0, 5.0)
    channels: int = 3
    background: float = 0.1


# -- synthetic sprites ------------------------------------------------------------

def _reflect(u: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    m = np.mod(u - lo, 2 * span)
    return lo + np.where(m <= span, m, 2 * span - m)


def render_sprites(size: int, channels: int, centers: np.ndarray, radii: np.ndarray,
                   colors: np.ndarray, shapes: np.ndarray, background) -> np.ndarray:
    """Rasterize sprites (later ones on top) with pixel-centre sampling."""
    img = np.empty((channels, size, size), dtype=np.float32)
    img[...] = np.asarray(background, dtype=np.float32).reshape(-1, 1, 1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for (cx, cy), r, col, disc in zip(centers, radii, colors, shapes):
        if disc:
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            inside = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        img[:, inside] = col[:, None]
    return img


def synth_clip(rng: np.random.Generator, params: SpriteParams = SpriteParams()) -> VideoClip:
    """Sprites (discs or squares) moving at constant velocity, bouncing off the
    borders. Ground-truth centres are kept on the clip."""
    if params.length < 2:
        raise ValueError("clip length must be >= 2")
    S = int(rng.integers(params.n_sprites[0], params.n_sprites[1] + 1))
    radii = rng.uniform(*params.radius, size=S)
    colors = rng.uniform(0.4, 1.0, size=(S, params.channels)).astype(np.float32)
    shapes = rng.random(S) < 0.5
    lo = radii[:, None] * np.ones((1, 2))
    hi = params.size - lo
    start = rng.uniform(lo, hi)
    angle = rng.uniform(0.0, 2 * math.pi, size=S)
    speed = rng.uniform(*params.speed, size=S)
    vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    t = np.arange(params.length, dtype=np.float64)[:, None, None]
    positions = _reflect(start[None] + t * vel[None], lo[None], hi[None])
    frames = np.stack([
        render_sprites(params.size, params.channels, positions[i], radii, colors, shapes,
                       params.background)
        for i in range(params.length)
    ])
    return VideoClip(frames, positions=positions, velocities=vel)


def synth_dataset(seed: int, n_clips: int, params: SpriteParams = SpriteParams()) -> list[VideoClip]:
    """Clip ``i`` depends only on (seed, i), so datasets regenerate from a manifest."""
    return [synth_clip(np.random.default_rng([seed, i]), params) for i in range(n_clips)]


def direction_bin(displacement: np.ndarray, n_bins: int = 8) -> int:
    """Index of the angular sector (centred on 0, 45, 90, ... degrees) of a 2D vector."""
    dx, dy = float(displacement[0]), float(displacement[1])
    return int(round(math.atan2(dy, dx) / (2 * math.pi / n_bins))) % n_bins


def synth_motion_pairs(rng: np.random.Generator, n: int, interval: int = 16,
                       params: SpriteParams = SpriteParams(), jitter: float = math.pi / 12
                       ) -> tuple[list[ClipPair], np.ndarray]:
    """Single-sprite frame pairs with no wall contact, labelled with the
    8-way direction bin of the sprite displacement (balanced labels)."""
    pairs, labels = [], []
    for i in range(n):
        label = i % 8
        r = rng.uniform(*params.radius)
        angle = label * math.pi / 4 + rng.uniform(-jitter, jitter)
        speed = rng.uniform(*params.speed)
        disp = interval * speed * np.array([math.cos(angle), math.sin(angle)])
        lo = np.maximum(r, r - disp)
        hi = np.minimum(params.size - r, params.size - r - disp)
        start = rng.uniform(lo, hi)
        color = rng.uniform(0.4, 1.0, size=(1, params.channels)).astype(np.float32)
        disc = np.array([rng.random() < 0.5])
        frames = [render_sprites(params.size, params.channels, c[None], np.array([r]), color, disc,
                                 params.background) for c in (start, start + disp)]
        pairs.append(ClipPair(frames[0], frames[1], interval, 0, disp[None]))
        labels.append(direction_bin(disp))
    return pairs, np.array(labels)


# -- frame-pair sampling ------------------------------------------------------------

@dataclass(frozen=True)
class IntervalPolicy:
    lo: int
    hi: int

    @classmethod
    def parse(cls, spec) -> "IntervalPolicy":
        """Accepts ``16``, ``"16"``, ``"8-24"`` or ``"uniform[8,24]"``."""
        if isinstance(spec, IntervalPolicy):
            return spec
        if isinstance(spec, (int, np.integer)):
            return cls(int(spec), int(spec))
        s = str(spec).strip()
        m = re.fullmatch(r"(?:uniform)?\[?\s*(\d+)\s*[-,:]\s*(\d+)\s*\]?", s)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo > hi:
                raise ValueError(f"interval range {s!r} is empty")
            return cls(lo, hi)
        if s.isdigit():
            return cls(int(s), int(s))
        raise ValueError(f"cannot parse interval policy {spec!r}")

    def __str__(self) -> str:
        return str(self.lo) if self.lo == self.hi else f"uniform[{self.lo},{self.hi}]"


def sample_frame_pair(clip: VideoClip, policy, rng: np.random.Generator) -> ClipPair:
    policy = IntervalPolicy.parse(policy)
    T = len(clip)
    if T <= policy.hi:
        raise ValueError(f"clip of {T} frames too short for interval {policy}")
    k = int(rng.integers(policy.lo, policy.hi + 1))
    i = int(rng.integers(0, T - k))
    disp = None
    if clip.positions is not None:
        disp = clip.positions[i + k] - clip.positions[i]
    return ClipPair(clip.frames[i], clip.frames[i + k], k, i, disp)


# -- augmentation ------------------------------------------------------------

def sample_crop(height: int, width: int, scale, rng: np.random.Generator,
                ratio=(3 / 4, 4 / 3), attempts: int = 10) -> tuple[int, int, int, int]:
    """Sample (x0, y0, w, h) with area fraction in ``scale`` and aspect in ``ratio``."""
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"crop scale must lie in (0, 1], got {scale}")
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            return int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)), w, h
    # fallback: whole image clipped to the ratio range
    aspect = width / height
    if aspect < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif aspect > ratio[1]:
        w, h = int(round(height * ratio[1])), height
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def resize_bilinear(img: np.ndarray, box: tuple[float, float, float, float], out: int) -> np.ndarray:
    """Bilinearly resample the ``box`` region of a (C, H, W) image to (C, out, out)
    using half-pixel centres (identity when the box is the full image and
    ``out`` equals its size)."""
    x0, y0, w, h = box
    C, H, W = img.shape
    ys = np.clip(y0 + (np.arange(out) + 0.5) * h / out - 0.5, 0, H - 1)
    xs = np.clip(x0 + (np.arange(out) + 0.5) * w / out - 0.5, 0, W - 1)
    y_lo = np.floor(ys).astype(int)
    x_lo = np.floor(xs).astype(int)
    y_hi = np.minimum(y_lo + 1, H - 1)
    x_hi = np.minimum(x_lo + 1, W - 1)
    wy = (ys - y_lo).astype(img.dtype)[:, None]
    wx = (xs - x_lo).astype(img.dtype)[None, :]
    top = img[:, y_lo][:, :, x_lo] * (1 - wx) + img[:, y_lo][:, :, x_hi] * wx
    bot = img[:, y_hi][:, :, x_lo] * (1 - wx) + img[:, y_hi][:, :, x_hi] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def random_resized_crop_pair(pair: ClipPair, rng: np.random.Generator, scale=(0.8, 1.0),
                             out_size: int | None = None, ratio=(3 / 4, 4 / 3)) -> ClipPair:
    """One crop rectangle, applied identically to both frames."""
    C, H, W = pair.current.shape
    out_size = out_size or H
    x0, y0, w, h = sample_crop(H, W, scale, rng, ratio)
    box = (x0, y0, w, h)
    disp = None
    if pair.displacement is not None:
        disp = pair.displacement * np.array([out_size / w, out_size / h])
    return replace(pair, current=resize_bilinear(pair.current, box, out_size),
                   future=resize_bilinear(pair.future, box, out_size),
                   displacement=disp, crop=(float(x0), float(y0), float(w), float(h)))


def crop_points(points: np.ndarray, crop, out_size: int) -> np.ndarray:
    """Map (..., 2) source-pixel (x, y) points into cropped output coordinates."""
    x0, y0, w, h = crop
    return (points - np.array([x0, y0])) * np.array([out_size / w, out_size / h])


# -- pixel normalization ---------------------------------------------------------

@dataclass(frozen=True)
class PixelStats:
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        shape = (-1, 1, 1)
        m = np.asarray(self.mean, dtype=np.float32).reshape(shape)
        s = np.asarray(self.std, dtype=np.float32).reshape(shape)
        return ((frames - m) / s).astype(np.float32)


def channel_stats(clips: list[VideoClip]) -> PixelStats:
    """Per-channel mean/std over every frame of the corpus."""
    C = clips[0].frames.shape[1]
    total = np.zeros(C)
    sq = np.zeros(C)
    count = 0
    for clip in clips:
        f = clip.frames.astype(np.float64)
        total += f.sum(axis=(0, 2, 3))
        sq += (f * f).sum(axis=(0, 2, 3))
        count += f.shape[0] * f.shape[2] * f.shape[3]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 1e-12))
    return PixelStats(tuple(round(float(v), 6) for v in mean), tuple(round(float(v), 6) for v in std))


# -- frame directories -------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: Path, image: np.ndarray) -> None:
    """Write a (C, H, W) [0, 1] image; format from the suffix (.png / .ppm)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def ingest_frames(directory, stats: PixelStats | None = None) -> list[VideoClip]:
    """One clip per subfolder; frames in lexicographic filename order."""
    root = Path(directory)
    clips = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        frames = []
        for f in files:
            try:
                img = read_image(f)
            except OSError as exc:
                raise ValueError(f"unreadable frame {f}: {exc}") from exc
            if frames and img.shape != frames[0].shape:
                raise ValueError(f"frame {f} has shape {img.shape}, expected {frames[0].shape}")
            frames.append(img)
        if len(frames) < 2:
            raise ValueError(f"folder {sub} has {len(frames)} frame(s); at least 2 are needed")
        arr = np.stack(frames)
        clips.append(VideoClip(stats.apply(arr) if stats else arr))
    return clips


def export_clip(clip: VideoClip, directory, suffix: str = ".ppm") -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip.frames):
        p = out / f"frame_{i:05d}{suffix}"
        write_image(p, frame)
        paths.append(p)
    return paths


# -- manifests ---------------------------------------------------------------

@dataclass
class Manifest:
    seed: int
    n_clips: int
    params: SpriteParams = field(default_factory=SpriteParams)

    def write(self, path) -> None:
        p = self.params
        lines = [
            f"seed={self.seed}",
            f"n_clips={self.n_clips}",
            f"n_sprites={p.n_sprites[0]},{p.n_sprites[1]}",
            f"speed={p.speed[0]!r},{p.speed[1]!r}",
            f"length={p.length}",
            f"size={p.size}",
            f"radius={p.radius[0]!r},{p.radius[1]!r}",
            f"channels={p.channels}",
            f"background={p.background!r}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        pair = lambda s, t: tuple(t(v) for v in s.split(","))  # noqa: E731
        params = SpriteParams(
            n_sprites=pair(kv["n_sprites"], int), speed=pair(kv["speed"], float),
            length=int(kv["length"]), size=int(kv["size"]), radius=pair(kv["radius"], float),
            channels=int(kv["channels"]), background=float(kv["background"]))
        return cls(int(kv["seed"]), int(kv["n_clips"]), params)

    def clips(self) -> list[VideoClip]:
        return synth_dataset(self.seed, self.n_clips, self.params)
