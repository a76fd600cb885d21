"""Layers built on the autodiff engine: linear, layernorm, attention, blocks.

Modules are thin views over a ParameterStore: constructing one registers (or
rebinds) named tensors, so the same module tree can be rebuilt over a loaded
checkpoint or over a float64 copy of the store for gradient checking.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore

LN_EPS = 1e-5
NEG_INF = -1e9


def _normal(std, shape):
    return lambda rng: rng.normal(0.0, std, size=shape)


def _zeros(shape):
    return lambda rng: np.zeros(shape)


def _ones(shape):
    return lambda rng: np.ones(shape)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, std: float = 0.02):
        self.w = store.param(f"{name}/w", (d_in, d_out), _normal(std, (d_in, d_out)))
        self.b = store.param(f"{name}/b", (d_out,), _zeros((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.g = store.param(f"{name}/g", (d,), _ones((d,)))
        self.b = store.param(f"{name}/b", (d,), _zeros((d,)))

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=-1, keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
        xn = ad.div(xc, ad.sqrt(ad.add(var, LN_EPS)))
        return ad.add(ad.mul(xn, self.g), self.b)


class Mlp:
    """Two-layer GELU MLP used inside transformer blocks (expansion 4)."""

    def __init__(self, store, name, d: int, d_hidden: int | None = None):
        d_hidden = d_hidden or 4 * d
        self.fc1 = Linear(store, f"{name}/fc1", d, d_hidden)
        self.fc2 = Linear(store, f"{name}/fc2", d_hidden, d)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """Additive (1,1,T,T) mask; positions may only attend to themselves and earlier."""
    m = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)
    return m[None, None]


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v over (B,H,T,dh) tensors."""
    dh = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class SelfAttention:
    def __init__(self, store, name, d: int, n_heads: int):
        self.n_heads = n_heads
        self.qkv = Linear(store, f"{name}/qkv", d, 3 * d)
        self.proj = Linear(store, f"{name}/proj", d, d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = split_heads(qkv[:, :, 0:d], self.n_heads)
        k = split_heads(qkv[:, :, d : 2 * d], self.n_heads)
        v = split_heads(qkv[:, :, 2 * d : 3 * d], self.n_heads)
        return self.proj(merge_heads(attention(q, k, v, mask)))


class CrossAttention:
    def __init__(self, store, name, d: int, d_kv: int, n_heads: int):
        self.n_heads = n_heads
        self.q = Linear(store, f"{name}/q", d, d)
        self.k = Linear(store, f"{name}/k", d_kv, d)
        self.v = Linear(store, f"{name}/v", d_kv, d)
        self.proj = Linear(store, f"{name}/proj", d, d)

    def __call__(self, x: Tensor, mem: Tensor) -> Tensor:
        q = split_heads(self.q(x), self.n_heads)
        k = split_heads(self.k(mem), self.n_heads)
        v = split_heads(self.v(mem), self.n_heads)
        return self.proj(merge_heads(attention(q, k, v)))


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, store, name, d: int, n_heads: int):
        self.ln1 = LayerNorm(store, f"{name}/ln1", d)
        self.attn = SelfAttention(store, f"{name}/attn", d, n_heads)
        self.ln2 = LayerNorm(store, f"{name}/ln2", d)
        self.mlp = Mlp(store, f"{name}/mlp", d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), mask))
        return ad.add(x, self.mlp(self.ln2(x)))


class DecoderBlock:
    """Pre-norm block with causal self-attention plus cross-attention to memory."""

    def __init__(self, store, name, d: int, d_kv: int, n_heads: int):
        self.ln1 = LayerNorm(store, f"{name}/ln1", d)
        self.attn = SelfAttention(store, f"{name}/attn", d, n_heads)
        self.ln2 = LayerNorm(store, f"{name}/ln2", d)
        self.cross = CrossAttention(store, f"{name}/cross", d, d_kv, n_heads)
        self.ln3 = LayerNorm(store, f"{name}/ln3", d)
        self.mlp = Mlp(store, f"{name}/mlp", d)

    def __call__(self, x: Tensor, mem: Tensor, mask: np.ndarray | None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), mask))
        x = ad.add(x, self.cross(self.ln2(x), mem))
        return ad.add(x, self.mlp(self.ln3(x)))


class Conv2d:
    def __init__(self, store, name, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int | None = None, init_std: float | None = None):
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        std = math.sqrt(1.0 / (c_in * k * k)) if init_std is None else init_std
        self.w = store.param(f"{name}/w", (c_out, c_in, k, k), _normal(std, (c_out, c_in, k, k)))
        self.b = store.param(f"{name}/b", (c_out,), _zeros((c_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos timestep embedding, (B, dim) for integer timesteps t."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> tuple[Tensor, int]:
    """Sum of -log p(target) over positions where mask is true.

    logits (B,T,V); targets (B,T) int; mask (B,T) bool. Returns (loss Tensor
    holding the sum, count) so callers can combine groups into an exact mean.
    """
    b, t, v = logits.shape
    logp = ad.log_softmax(logits, axis=-1)
    flat = ad.reshape(logp, (b * t, v))
    rows = np.arange(b * t)
    picked = ad.take(flat, (rows, targets.reshape(-1)))
    weights = mask.reshape(-1).astype(logits.dtype)
    loss_sum = ad.mul(ad.sum_(ad.mul(picked, weights)), -1.0)
    return loss_sum, int(mask.sum())
