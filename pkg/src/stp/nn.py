"""Parameter containers and transformer building blocks on top of ``numerics``."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import numerics as F
from .numerics import Tensor


class Module:
    """Base container. Parameters are discovered by walking attributes in
    definition order, which fixes the ordering used by optimizers and checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return F.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = _normal(rng, (d_in, d_out), std)
        self.bias = F.parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.weight = F.parameter(np.ones(d))
        self.bias = F.parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention; ``kv`` defaults to ``x`` (self-attention).

    Setting ``record = True`` keeps the last post-softmax weights in
    ``last_weights`` with shape (B, heads, Lq, Lk).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"dim {d} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)
        self.record = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, kv: Tensor | None = None) -> Tensor:
        kv = x if kv is None else kv
        q, k, v = self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv))
        if self.record:
            out, self.last_weights = F.attention(q, k, v, return_weights=True)
        else:
            out = F.attention(q, k, v)
        B, h, L, dh = out.shape
        return self.proj(out.transpose(0, 2, 1, 3).reshape(B, L, h * dh))


class Block(Module):
    """Pre-norm transformer block: global self-attention then FFN."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SelfCrossBlock(Module):
    """Pre-norm decoder block: self-attention and FFN on the query stream, plus
    cross-attention from the query stream into a read-only condition stream."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross = Attention(d, heads, rng)
        self.norm3 = LayerNorm(d)
        self.mlp = MLP(d, int(d * mlp_ratio), rng)

    def forward(self, x: Tensor, kv: Tensor) -> Tensor:
        if kv.shape[-1] != x.shape[-1]:
            raise F.DimensionError(f"query dim {x.shape[-1]} != condition dim {kv.shape[-1]}")
        x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm2(x), kv)
        return x + self.mlp(self.norm3(x))
