"""Layers built on :mod:`omnistage.tensor`: linear maps, norms, attention blocks, conv."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Buffer, Param, Tensor


class Module:
    """Container whose ``Param`` attributes (and sub-modules) are discovered by name."""

    def named_parameters(self, prefix: str = "", include_buffers: bool = True) -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Param):
                if include_buffers or not isinstance(value, Buffer):
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".", include_buffers)
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.", include_buffers)

    def parameters(self, include_buffers: bool = False) -> list[Param]:
        return [p for _, p in self.named_parameters(include_buffers=include_buffers)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters(include_buffers=True):
            p.astype(dtype)
        return self

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Param(uniform_init(rng, d_in, (d_in, d_out), dtype))
        self.bias = Param(np.zeros(d_out, dtype=dtype)) if bias else None
        self._d_in = d_in

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self._d_in:
            raise ShapeError(f"linear expects last dim {self._d_in}, got {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        if d <= 0:
            raise ShapeError("layer_norm dimension must be positive")
        self.gain = Param(np.ones(d, dtype=dtype))
        self.bias = Param(np.zeros(d, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float32, scale: float = 0.02):
        self.weight = Param((rng.standard_normal((n, d)) * scale).astype(dtype))

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.weight, ids)


def causal_mask(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


class TransformerBlock(Module):
    """Pre-norm multi-head self-attention + GELU feed-forward, both residual."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 causal: bool = False, ff_mult: int = 4):
        if n_heads <= 0 or d % n_heads:
            raise ConfigError(f"n_heads={n_heads} does not divide d={d}")
        self.ln1 = LayerNorm(d, dtype)
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, ff_mult * d, rng, dtype)
        self.fc2 = Linear(ff_mult * d, d, rng, dtype)
        self._d = d
        self._heads = n_heads
        self._causal = causal

    def attention(self, x: Tensor, causal: bool) -> Tensor:
        n, d = x.shape
        h = self._heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (n, h, dh)), (1, 0, 2))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        if causal:
            scores = scores + causal_mask(n, x.dtype)
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        return self.o(T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d)))

    def __call__(self, x: Tensor, causal: bool | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self._d:
            raise ShapeError(f"transformer block expects [T x {self._d}], got {x.shape}")
        causal = self._causal if causal is None else causal
        x = x + self.attention(self.ln1(x), causal)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


def transformer_block(x: Tensor, weights: TransformerBlock, causal: bool) -> Tensor:
    return weights(x, causal=causal)


class Conv1d(Module):
    """1-d convolution over rows of a [L x C_in] tensor via gathered windows."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator,
                 dtype=np.float32, padding: int | None = None):
        self.weight = Param(uniform_init(rng, kernel * c_in, (kernel * c_in, c_out), dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))
        self._k, self._s, self._cin = kernel, stride, c_in
        self._pad = (kernel - 1) // 2 if padding is None else padding

    def out_len(self, n: int) -> int:
        return (n + 2 * self._pad - self._k) // self._s + 1

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self._cin:
            raise ShapeError(f"conv1d expects [L x {self._cin}], got {x.shape}")
        n_out = self.out_len(x.shape[0])
        if n_out < 1:
            raise ShapeError(f"conv1d input of length {x.shape[0]} too short for kernel {self._k}")
        xp = T.pad_rows(x, self._pad, self._pad)
        idx = np.arange(n_out)[:, None] * self._s + np.arange(self._k)[None, :]
        cols = T.reshape(T.take_rows(xp, idx), (n_out, self._k * self._cin))
        return T.matmul(cols, self.weight) + self.bias


def sinusoidal_positions(n: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange((d + 1) // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : d // 2]
    return out.astype(dtype)
