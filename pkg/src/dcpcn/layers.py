"""Parameter containers and the small set of layers the model is built from."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Collects learnable tensors from attributes, recursively, in definition order."""

    def named_parameters(self, prefix: str = ""):
        seen: set[int] = set()
        for name, tensor in self._walk(prefix):
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            yield name, tensor

    def _walk(self, prefix: str):
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{attr}", value
            elif hasattr(value, "named_parameters"):
                yield from _children(value, f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if hasattr(item, "named_parameters"):
                        yield from _children(item, f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _children(obj, prefix: str):
    if isinstance(obj, Module):
        yield from obj._walk(prefix)
    else:
        yield from obj.named_parameters(prefix)


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _uniform(rng, bound, (n_in, n_out), dtype)
        self.bias = _uniform(rng, bound, (n_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float64):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return ag.transpose(ag.reshape(x, (b, n, self.heads, c // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        b, n, c = x.shape
        attended = ag.scaled_dot_attention(
            self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        )
        merged = ag.reshape(ag.transpose(attended, (0, 2, 1, 3)), (b, n, c))
        return self.out(merged)


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = MLP([dim, 2 * dim, dim], rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.ffn = MLP([dim, 2 * dim, dim], rng, dtype)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ffn(self.norm3(x))
