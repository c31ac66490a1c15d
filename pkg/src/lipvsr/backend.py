"""Conformer encoder over the front-end feature sequence."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MultiHeadAttention, PreNormFeedForward, sinusoidal_encoding
from .tensor import DimensionError, LayerNorm, swish


@dataclass
class ConformerConfig:
    blocks: int = 3
    model_dim: int = 256
    ff_dim: int = 1024
    heads: int = 8
    depthwise_kernel: int = 31

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError("depthwise_kernel must be odd")


class ConvModule(nn.Module):
    """LN -> pointwise (2d) -> GLU -> depthwise -> BN -> Swish -> pointwise."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dw = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim, bias=False)
        self.bn = nn.BatchNorm1d(dim)
        self.pw2 = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = F.glu(self.pw1(y), dim=1)
        y = swish(self.bn(self.dw(y)))
        return self.pw2(y).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        d = cfg.model_dim
        self.ff1 = PreNormFeedForward(d, cfg.ff_dim)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads)
        self.conv = ConvModule(d, cfg.depthwise_kernel)
        self.ff2 = PreNormFeedForward(d, cfg.ff_dim)
        self.out_norm = LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        a, weights = self.attn(self.attn_norm(x))
        x = x + a
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x), weights


class Conformer(nn.Module):
    """Stack of conformer blocks; sinusoidal positions are added to the input.

    With zero blocks the module is the identity.
    """

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([ConformerBlock(cfg) for _ in range(cfg.blocks)])

    def forward(self, h: torch.Tensor, return_attention: bool = False):
        if h.shape[-1] != self.cfg.model_dim:
            raise DimensionError(f"conformer expects width {self.cfg.model_dim}, got {h.shape[-1]}")
        maps = []
        if self.blocks:
            h = h + sinusoidal_encoding(h.shape[-2], h.shape[-1], h.dtype)
        for block in self.blocks:
            h, w = block(h)
            maps.append(w)
        return (h, maps) if return_attention else h
