"""Landmark-guided visual front-end.

Per frame, a tubelet embedding is computed around every lip landmark, the
landmark's offsets to all other landmarks are encoded and added, and a small
pre-norm transformer mixes the landmark tokens before average pooling.  A
parallel path encodes frame-to-frame changes of the lip geometry.  Both are
concatenated and projected to the back-end width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import K_LANDMARKS
from .layers import FeedForward, MultiHeadAttention
from .tensor import Conv2d, LayerNorm, swish

# 0-based positions inside the 49..68 lip set: (49,55) outer width, (52,58) outer
# height, (61,65) inner width, (63,67) inner height.
LIP_GEOMETRY_PAIRS = ((0, 6), (3, 9), (12, 16), (14, 18))


@dataclass
class FrontendConfig:
    num_landmarks: int = K_LANDMARKS
    patch_size: int = 24
    patch_resolution: int = 24
    fps_set: tuple[int, ...] = (20, 22, 24, 26, 28, 30, 32)
    tubelet_channels: tuple[int, int, int] = (64, 128, 256)
    temporal_depth: int = 5
    relpos_hidden: int = 128
    fusion_layers: int = 3
    fusion_heads: int = 8
    fusion_mlp_dim: int = 512
    motion_dim: int = 64
    output_dim: int = 256
    use_relpos: bool = True
    use_motion: bool = True
    patch_mode: str = "landmark"          # "landmark" or "mouth"
    mouth_patch_size: int = 64
    geometry_pairs: tuple[tuple[int, int], ...] = LIP_GEOMETRY_PAIRS

    def __post_init__(self):
        self.fps_set = tuple(int(v) for v in self.fps_set)
        self.tubelet_channels = tuple(int(v) for v in self.tubelet_channels)
        self.geometry_pairs = tuple(tuple(int(a) for a in p) for p in self.geometry_pairs)
        if self.patch_size % 2 or self.patch_size < 8:
            raise ValueError(f"patch_size must be even and >= 8, got {self.patch_size}")
        if any(v % 2 for v in self.fps_set):
            raise ValueError(f"fps_set values must be even, got {self.fps_set}")
        if self.patch_mode not in ("landmark", "mouth"):
            raise ValueError(f"unknown patch_mode {self.patch_mode!r}")
        if self.temporal_depth < 1 or self.temporal_depth % 2 == 0:
            raise ValueError("temporal_depth must be odd and positive")

    @property
    def tubelet_dim(self) -> int:
        return self.tubelet_channels[-1]

    @property
    def geometry_dim(self) -> int:
        return 2 * self.num_landmarks + len(self.geometry_pairs)


def _resize(patches: np.ndarray, size: int) -> np.ndarray:
    lead = patches.shape[:-2]
    x = torch.from_numpy(np.ascontiguousarray(patches.reshape(-1, 1, *patches.shape[-2:])))
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=True)
    return y.numpy().reshape(*lead, size, size)


def extract_patches(clip: np.ndarray, track: np.ndarray, w: int, resolution: int = 24) -> np.ndarray:
    """``w×w`` crops centered on each landmark, zero-padded, resized to ``resolution``.

    ``clip`` is ``T×H×W`` (or batched ``B×T×H×W``), ``track`` ``T×K×2`` (x, y).
    Returns ``T×K×r×r`` (or ``B×T×K×r×r``) float32.  The crop spans
    ``[c - w/2, c + w/2)`` around the rounded landmark coordinate ``c``.
    """
    clip = np.asarray(clip, dtype=np.float32)
    track = np.asarray(track)
    if clip.ndim == 3:
        return extract_patches(clip[None], track[None], w, resolution)[0]
    B, T, H, W = clip.shape
    half = w // 2
    padded = np.zeros((B, T, H + 2 * w, W + 2 * w), dtype=np.float32)
    padded[:, :, w:w + H, w:w + W] = clip
    centers = np.floor(track.astype(np.float64) + 0.5).astype(np.int64)
    cx = np.clip(centers[..., 0], -half, W + half)
    cy = np.clip(centers[..., 1], -half, H + half)
    offs = np.arange(w) - half + w
    rows = (cy[..., None] + offs)[..., :, None]          # B,T,K,w,1
    cols = (cx[..., None] + offs)[..., None, :]          # B,T,K,1,w
    b = np.arange(B).reshape(B, 1, 1, 1, 1)
    t = np.arange(T).reshape(1, T, 1, 1, 1)
    patches = padded[b, t, rows, cols]
    if w != resolution:
        patches = _resize(patches, resolution)
    return patches


def mouth_centroid_track(track: np.ndarray) -> np.ndarray:
    return np.asarray(track, dtype=np.float64).mean(axis=-2, keepdims=True)


class TubeletEncoder(nn.Module):
    """3-D conv stem over each landmark's patch stack, then per-frame 2-D convs and pooling."""

    def __init__(self, channels=(64, 128, 256), temporal_depth: int = 5):
        super().__init__()
        c1, c2, c3 = channels
        d = temporal_depth
        self.conv3d = nn.Conv3d(1, c1, (d, 3, 3), stride=(1, 2, 2), padding=(d // 2, 1, 1), bias=False)
        self.bn3d = nn.BatchNorm3d(c1)
        self.conv2 = Conv2d(c1, c2, 3, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.conv3 = Conv2d(c2, c3, 3, stride=2, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(c3)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """``B×T×K×P×P`` -> ``B×T×K×C``."""
        B, T, K, P, _ = patches.shape
        x = patches.permute(0, 2, 1, 3, 4).reshape(B * K, 1, T, P, P)
        x = swish(self.bn3d(self.conv3d(x)))
        x = F.max_pool3d(x, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        C1, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(1, 2).reshape(B * K * T, C1, h, w)
        x = swish(self.bn2(self.conv2(x)))
        x = swish(self.bn3(self.conv3(x)))
        x = x.mean(dim=(2, 3))
        return x.reshape(B, K, T, -1).transpose(1, 2)


def pairwise_offsets(track: torch.Tensor, frame_width: float) -> torch.Tensor:
    """``...×K×2`` -> ``...×K×2(K-1)``: p_i - p_j for j != i in ascending j."""
    K = track.shape[-2]
    others = torch.tensor([[j for j in range(K) if j != i] for i in range(K)], dtype=torch.long)
    p = track / frame_width
    diff = p.unsqueeze(-2) - p[..., others, :]
    return diff.flatten(-2)


class RelativePositionEncoder(nn.Module):
    def __init__(self, num_landmarks: int, hidden: int, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * (num_landmarks - 1), hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, track: torch.Tensor, frame_width: float) -> torch.Tensor:
        return self.fc2(swish(self.fc1(pairwise_offsets(track, frame_width))))


class FusionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_dim)

    def forward(self, z):
        a, weights = self.attn(self.norm1(z))
        y = a + z
        return self.mlp(self.norm2(y)) + y, weights


class AttentiveFusion(nn.Module):
    """Self-attention over the landmark tokens of each frame, then mean over tokens."""

    def __init__(self, dim: int, layers: int, heads: int, mlp_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList([FusionBlock(dim, heads, mlp_dim) for _ in range(layers)])

    def forward(self, u: torch.Tensor):
        """``B×T×K×d`` -> (``B×T×d``, attention ``B×layers×heads×T×K×K``)."""
        B, T, K, d = u.shape
        z = u.reshape(B * T, K, d)
        maps = []
        for block in self.blocks:
            z, w = block(z)
            maps.append(w.reshape(B, T, *w.shape[1:]).transpose(1, 2))
        f = z.mean(dim=1).reshape(B, T, d)
        attn = torch.stack(maps, dim=1) if maps else u.new_zeros(B, 0, 0, T, K, K)
        return f, attn


def lip_geometry(track: torch.Tensor, frame_width: float, pairs) -> torch.Tensor:
    """Normalized coordinates plus the Euclidean distances of ``pairs``: ``...×T×(2K+len(pairs))``."""
    p = track / frame_width
    dists = [torch.linalg.vector_norm(p[..., a, :] - p[..., b, :], dim=-1, keepdim=True) for a, b in pairs]
    return torch.cat([p.flatten(-2)] + dists, dim=-1)


def motion_vectors(geometry: torch.Tensor) -> torch.Tensor:
    """Frame-to-frame differences along the time axis (-2); the first step is zero."""
    first = torch.zeros_like(geometry[..., :1, :])
    return torch.cat([first, geometry[..., 1:, :] - geometry[..., :-1, :]], dim=-2)


class MotionEncoder(nn.Module):
    def __init__(self, geometry_dim: int, dim: int, pairs):
        super().__init__()
        self.pairs = pairs
        self.conv = nn.Conv1d(geometry_dim, dim, 3, padding=1)

    def forward(self, track: torch.Tensor, frame_width: float) -> torch.Tensor:
        delta = motion_vectors(lip_geometry(track, frame_width, self.pairs))
        return swish(self.conv(delta.transpose(1, 2))).transpose(1, 2)


class Frontend(nn.Module):
    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.tubelet_dim
        self.tubelet = TubeletEncoder(cfg.tubelet_channels, cfg.temporal_depth)
        self.relpos = RelativePositionEncoder(cfg.num_landmarks, cfg.relpos_hidden, d)
        self.fusion = AttentiveFusion(d, cfg.fusion_layers, cfg.fusion_heads, cfg.fusion_mlp_dim)
        self.motion = MotionEncoder(cfg.geometry_dim, cfg.motion_dim, cfg.geometry_pairs)
        self.proj = nn.Linear(d + cfg.motion_dim, cfg.output_dim)

    def forward(self, patches: torch.Tensor, track: torch.Tensor, frame_width: float):
        """``patches`` ``B×T×K'×P×P`` (K' = K, or 1 in mouth mode); ``track`` ``B×T×K×2``.

        Returns (H0 ``B×T×output_dim``, fusion attention maps).
        """
        v = self.tubelet(patches)
        if self.cfg.use_relpos and self.cfg.patch_mode == "landmark":
            v = v + self.relpos(track, frame_width)
        f, attn = self.fusion(v)
        if self.cfg.use_motion:
            m = self.motion(track, frame_width)
        else:
            m = f.new_zeros(*f.shape[:2], self.cfg.motion_dim)
        return self.proj(torch.cat([f, m], dim=-1)), attn

    def prepare_patches(self, clips: np.ndarray, tracks: np.ndarray,
                        patch_size: int | None = None) -> np.ndarray:
        """Crop (and resize) the pixel input for one batch; ``clips`` in [0, 1]."""
        cfg = self.cfg
        if cfg.patch_mode == "mouth":
            w = cfg.mouth_patch_size
            return extract_patches(clips, mouth_centroid_track(tracks), w, cfg.patch_resolution)
        return extract_patches(clips, tracks, patch_size or cfg.patch_size, cfg.patch_resolution)

    def sample_patch_size(self, rng: np.random.Generator | None, training: bool) -> int:
        """Flexible patch size: a random window from ``fps_set`` while training, fixed otherwise."""
        if training and rng is not None and self.cfg.fps_set:
            return int(self.cfg.fps_set[int(rng.integers(len(self.cfg.fps_set)))])
        return self.cfg.patch_size
