"""Attention, feed-forward and positional-encoding building blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .tensor import DimensionError, LayerNorm, softmax, swish


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention that also returns its weights.

    ``mask`` is boolean, broadcastable to ``(..., heads, Nq, Nk)``; True marks
    key positions that may be attended.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-2, -3)

    def forward(self, query, key=None, value=None, mask=None):
        key = query if key is None else key
        value = key if value is None else value
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(-2, -3)
        ctx = ctx.reshape(*ctx.shape[:-2], self.dim)
        return self.out(ctx), attn


class FeedForward(nn.Module):
    """Linear -> Swish -> Linear."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(swish(self.fc1(x)))


class PreNormFeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden)

    def forward(self, x):
        return self.ff(self.norm(x))


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)
