"""Frozen-encoder behaviour cloning on a pixel-rendered point-mass task, plus
a linear motion-direction probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import numerics as F
from .data import ClipPair, PixelStats, render_sprites
from .encoder import Encoder
from .nn import Linear, Module
from .numerics import Tensor
from .training import AdamState, TrainConfig, adamw_step


# -- toy environment ---------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    image_size: int = 32
    channels: int = 3
    max_step: float = 0.05  # arena units per step at |action| = 1
    horizon: int = 50
    success_radius: float = 0.1
    min_start_distance: float = 0.3
    distractor: bool = False


@dataclass
class EnvState:
    pos: np.ndarray
    goal: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    obstacle: np.ndarray | None = None
    t: int = 0


class ToyEnv:
    """Point mass in the unit square that must reach a goal disc within the horizon.

    Observations are (image, proprio) where proprio is (x, y, vx, vy) and the
    goal is only visible in the image.
    """

    action_dim = 2
    proprio_dim = 4

    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg
        self.state: EnvState | None = None

    def reset(self, seed: int):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(0.1, 0.9, size=2)
        while True:
            goal = rng.uniform(0.1, 0.9, size=2)
            if np.linalg.norm(goal - pos) >= self.cfg.min_start_distance:
                break
        obstacle = rng.uniform(0.1, 0.9, size=2) if self.cfg.distractor else None
        self.state = EnvState(pos, goal, np.zeros(2), obstacle)
        return self.observe()

    def render(self, state: EnvState | None = None) -> np.ndarray:
        s = state or self.state
        size = self.cfg.image_size
        centers = [s.goal * size, s.pos * size]
        radii = [size * 0.09, size * 0.06]
        colors = [np.array([0.2, 0.9, 0.3]), np.array([0.95, 0.25, 0.2])]
        shapes = [True, False]
        if s.obstacle is not None:
            centers.insert(0, s.obstacle * size)
            radii.insert(0, size * 0.08)
            colors.insert(0, np.array([0.3, 0.4, 0.95]))
            shapes.insert(0, False)
        colors = np.array(colors, dtype=np.float32)[:, :self.cfg.channels]
        return render_sprites(size, self.cfg.channels, np.array(centers), np.array(radii),
                              colors, np.array(shapes), 0.1)

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.state
        return self.render(), np.concatenate([s.pos, s.velocity])

    def success(self) -> bool:
        return bool(np.linalg.norm(self.state.pos - self.state.goal) <= self.cfg.success_radius)

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        s = self.state
        new = np.clip(s.pos + a * self.cfg.max_step, 0.0, 1.0)
        s.velocity = (new - s.pos) / self.cfg.max_step
        s.pos = new
        s.t += 1
        done = self.success() or s.t >= self.cfg.horizon
        return self.observe(), done


def scripted_expert(state: EnvState, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Proportional controller toward the goal, clipped to the action box."""
    return np.clip((state.goal - state.pos) / cfg.max_step, -1.0, 1.0)


# -- demonstrations ----------------------------------------------------------

@dataclass
class Trajectory:
    images: np.ndarray   # (T, C, H, W)
    proprio: np.ndarray  # (T, P)
    actions: np.ndarray  # (T, A)

    def __post_init__(self):
        n = len(self.actions)
        if n == 0 or len(self.images) != n or len(self.proprio) != n:
            raise ValueError("trajectory must be nonempty with matching lengths")


def collect_demos(n: int, seed: int, cfg: EnvConfig = EnvConfig()) -> list[Trajectory]:
    env = ToyEnv(cfg)
    demos = []
    for ep in range(n):
        img, prop = env.reset(seed + ep)
        imgs, props, acts = [], [], []
        done = False
        while not done:
            a = scripted_expert(env.state, cfg)
            imgs.append(img)
            props.append(prop)
            acts.append(a)
            (img, prop), done = env.step(a)
        demos.append(Trajectory(np.stack(imgs).astype(np.float32), np.stack(props),
                                np.stack(acts)))
    return demos


def save_demos(path, demos: Sequence[Trajectory]) -> None:
    from .checkpoint import write_archive
    tensors = {}
    for i, d in enumerate(demos):
        tensors[f"traj/{i:05d}/images"] = d.images.astype(np.float32)
        tensors[f"traj/{i:05d}/proprio"] = d.proprio.astype(np.float32)
        tensors[f"traj/{i:05d}/actions"] = d.actions.astype(np.float32)
    write_archive(path, tensors, 0)


def load_demos(path) -> list[Trajectory]:
    from .checkpoint import read_archive
    tensors, _ = read_archive(path)
    keys = sorted({k.split("/")[1] for k in tensors if k.startswith("traj/")})
    return [Trajectory(tensors[f"traj/{k}/images"], tensors[f"traj/{k}/proprio"],
                       tensors[f"traj/{k}/actions"]) for k in keys]


# -- policy ------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyConfig:
    feature_dim: int = 128
    proprio_dim: int = 4
    action_dim: int = 2
    hidden: tuple[int, ...] = (256, 256)
    history: int = 1
    views: int = 1
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.views * self.history * self.feature_dim + self.proprio_dim


class MLPPolicy(Module):
    """GELU MLP from fused (visual, proprio) features to actions. Inputs are
    standardized with statistics fixed at training time."""

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dims = (cfg.input_dim, *cfg.hidden, cfg.action_dim)
        self.layers = [Linear(a, b, rng, std=np.sqrt(1.0 / a)) for a, b in zip(dims[:-1], dims[1:])]
        self._mean = np.zeros(cfg.input_dim, dtype=np.float32)
        self._std = np.ones(cfg.input_dim, dtype=np.float32)

    def forward(self, features, instruction=None) -> Tensor:
        # instruction slot kept for interface parity; single-task policies ignore it
        x = Tensor(((np.asarray(features) - self._mean) / self._std).astype(np.float32))
        for layer in self.layers[:-1]:
            x = F.gelu(layer(x))
        return self.layers[-1](x)

    def act(self, features) -> np.ndarray:
        with F.no_grad():
            return self.forward(np.asarray(features)[None]).data[0]


def encode_cls(encoder: Encoder, images: np.ndarray, stats: PixelStats | None = None,
               chunk: int = 256) -> np.ndarray:
    """CLS features of unmasked images, computed without building a graph."""
    images = np.asarray(images, dtype=np.float32)
    if stats is not None:
        images = stats.apply(images)
    out = []
    with F.no_grad():
        for i in range(0, len(images), chunk):
            out.append(encoder.encode_full(images[i:i + chunk]).tokens.data[:, 0])
    return np.concatenate(out) if out else np.zeros((0, encoder.cfg.dim), np.float32)


def fuse(cls_history: np.ndarray, proprio: np.ndarray) -> np.ndarray:
    """Concatenate per-view/per-frame CLS features with proprioception."""
    return np.concatenate([np.asarray(cls_history).reshape(-1), np.asarray(proprio).reshape(-1)])


def extract_features(encoder: Encoder, images: np.ndarray, proprio, cfg: PolicyConfig,
                     stats: PixelStats | None = None) -> np.ndarray:
    """``images`` holds views * history frames (C, H, W); returns the fused vector."""
    images = np.asarray(images).reshape(-1, *np.shape(images)[-3:])
    if len(images) != cfg.views * cfg.history or np.size(proprio) != cfg.proprio_dim:
        raise ValueError(f"expected {cfg.views * cfg.history} images and "
                         f"{cfg.proprio_dim}-dim proprio, got {len(images)} and {np.size(proprio)}")
    feats = encode_cls(encoder, images, stats)
    if feats.shape[1] != cfg.feature_dim:
        raise ValueError(f"encoder dim {feats.shape[1]} != policy feature dim {cfg.feature_dim}")
    return fuse(feats, proprio)


def _history_stack(feats: np.ndarray, history: int) -> np.ndarray:
    """Row t holds features of frames t-history+1 .. t, repeating frame 0 at the start."""
    T = len(feats)
    idx = np.clip(np.arange(T)[:, None] + np.arange(-history + 1, 1)[None], 0, T - 1)
    return feats[idx].reshape(T, -1)


def demo_features(encoder: Encoder, demos: Sequence[Trajectory], cfg: PolicyConfig,
                  stats: PixelStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for d in demos:
        feats = encode_cls(encoder, d.images, stats)
        xs.append(np.concatenate([_history_stack(feats, cfg.history), d.proprio], axis=1))
        ys.append(d.actions)
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.float32)


def bc_loss(policy: MLPPolicy, x: np.ndarray, y: np.ndarray) -> Tensor:
    return F.mse_loss(policy(x), y)


def fit_policy(policy: MLPPolicy, x: np.ndarray, y: np.ndarray) -> list[float]:
    """Minibatch Adam on the behaviour-cloning MSE; returns per-epoch mean loss."""
    cfg = policy.cfg
    policy._mean = x.mean(axis=0).astype(np.float32)
    policy._std = (x.std(axis=0) + 1e-6).astype(np.float32)
    params = policy.parameters()
    state = AdamState.zeros_like(params)
    opt_cfg = TrainConfig(base_lr=cfg.lr, weight_decay=0.0, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            for p in params:
                p.grad = None
            loss = bc_loss(policy, x[idx], y[idx])
            F.backward(loss)
            adamw_step(params, [p.grad for p in params], state, cfg.lr, opt_cfg)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


def bc_train(policy: MLPPolicy, demos: Sequence[Trajectory], encoder: Encoder,
             stats: PixelStats | None = None) -> list[float]:
    """Train ``policy`` on frozen-encoder features of ``demos``; the encoder is
    only ever run under ``no_grad`` and is never handed to the optimizer."""
    if not demos:
        raise ValueError("behaviour cloning needs at least one demonstration")
    x, y = demo_features(encoder, demos, policy.cfg, stats)
    return fit_policy(policy, x, y)


class FrozenEncoderAgent:
    """Callable (image, proprio) -> action keeping its own frame history."""

    def __init__(self, encoder: Encoder, policy: MLPPolicy, stats: PixelStats | None = None):
        self.encoder, self.policy, self.stats = encoder, policy, stats
        self._frames: list[np.ndarray] = []

    def reset(self) -> None:
        self._frames = []

    def __call__(self, image: np.ndarray, proprio: np.ndarray) -> np.ndarray:
        feat = encode_cls(self.encoder, image[None], self.stats)[0]
        if not self._frames:
            self._frames = [feat] * self.policy.cfg.history
        self._frames = (self._frames + [feat])[-self.policy.cfg.history:]
        return self.policy.act(fuse(np.stack(self._frames), proprio))


def rollout_eval(agent: Callable, env: ToyEnv, episodes: int, base_seed: int) -> float:
    """Fraction of episodes reaching the goal; episode ``ep`` uses seed base_seed + ep."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    wins = 0
    for ep in range(episodes):
        img, prop = env.reset(base_seed + ep)
        if hasattr(agent, "reset"):
            agent.reset()
        done = False
        while not done:
            (img, prop), done = env.step(agent(img, prop))
        wins += env.success()
    return wins / episodes


def expert_agent(env: ToyEnv) -> Callable:
    return lambda image, proprio: scripted_expert(env.state, env.cfg)


def random_agent(seed: int) -> Callable:
    rng = np.random.default_rng(seed)
    return lambda image, proprio: rng.uniform(-1.0, 1.0, size=2)


# -- motion probe ------------------------------------------------------------

def linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                 test_fraction: float = 0.25) -> float:
    """Held-out accuracy of a multinomial logistic-regression probe."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("probe needs at least two classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_test = max(1, int(round(len(labels) * test_fraction)))
    test, train = order[:n_test], order[n_test:]
    mu = features[train].mean(axis=0)
    sd = features[train].std(axis=0) + 1e-6
    clf = LogisticRegression(max_iter=3000, C=1.0)
    clf.fit((features[train] - mu) / sd, labels[train])
    return float((clf.predict((features[test] - mu) / sd) == labels[test]).mean())


def pair_features(encoder: Encoder, pairs: Sequence[ClipPair],
                  stats: PixelStats | None = None) -> np.ndarray:
    cur = encode_cls(encoder, np.stack([p.current for p in pairs]), stats)
    fut = encode_cls(encoder, np.stack([p.future for p in pairs]), stats)
    return np.concatenate([cur, fut], axis=1)


def motion_probe(encoder: Encoder, pairs: Sequence[ClipPair], labels: np.ndarray,
                 stats: PixelStats | None = None, seed: int = 0) -> float:
    """Direction-bin accuracy of a linear probe on concatenated (current, future) CLS."""
    return linear_probe(pair_features(encoder, pairs, stats), labels, seed)
