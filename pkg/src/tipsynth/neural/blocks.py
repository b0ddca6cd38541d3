"""Network building blocks shared by the learned stages.

Tensors are float32, time-major: sequences are (B, T, D); graph features
are (B, C, T, V).
"""
from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

# flip on to check every block output for NaN/inf
NAN_GUARD = False


class ShapeError(ValueError):
    pass


class NetConfigError(ValueError):
    pass


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if NAN_GUARD and not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values after {where}")
    return x


def film(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Feature-wise linear modulation ``gamma * x + beta``."""
    try:
        shape = torch.broadcast_shapes(x.shape, gamma.shape, beta.shape)
    except RuntimeError as e:
        raise ShapeError(f"cannot modulate {tuple(x.shape)} with {tuple(gamma.shape)}/{tuple(beta.shape)}") from e
    if tuple(shape) != tuple(x.shape):
        raise ShapeError(f"modulation would broadcast {tuple(x.shape)} to {tuple(shape)}")
    return gamma * x + beta


class FiLMGenerator(nn.Module):
    """Two-layer MLP mapping a conditioning vector to (gamma, beta).

    The output layer starts at zero so modulation begins as the identity.
    """

    def __init__(self, cond_dim: int, features: int, hidden: int = 64, groups: int = 1):
        super().__init__()
        self.features = features
        self.groups = groups
        self.fc1 = nn.Linear(cond_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * features * groups)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, cond: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        h = self.fc2(F.gelu(self.fc1(cond)))
        h = h.reshape(*cond.shape[:-1], self.groups, 2, self.features)
        return [(1.0 + h[..., g, 0, :], h[..., g, 1, :]) for g in range(self.groups)]


def sinusoidal_encoding(T: int, d: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float32)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float32)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(T, d)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise NetConfigError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, valid: Optional[torch.Tensor] = None, keep_weights: bool = False):
        B, T, _ = x.shape
        q, k, v = self.qkv(x).reshape(B, T, 3, self.heads, self.d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        if keep_weights:
            self.last_weights = w.detach()
        h = (w @ v).transpose(1, 2).reshape(B, T, self.d)
        return self.out(h)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, x, valid=None, keep_weights=False):
        x = x + self.attn(self.norm1(x), valid, keep_weights)
        return x + self.ff(self.norm2(x))


class TransformerEncoder(nn.Module):
    def __init__(self, d: int = 64, depth: int = 4, heads: int = 8, ff_mult: int = 2):
        super().__init__()
        if d % heads:
            raise NetConfigError(f"model width {d} is not divisible by {heads} heads")
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ff_mult) for _ in range(depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, valid=None, modulation=None):
        """``modulation``: optional per-layer (gamma, beta) applied after each layer."""
        for i, layer in enumerate(self.layers):
            x = layer(x, valid)
            if modulation is not None:
                x = film(x, *modulation[i])
            check_finite(x, f"encoder layer {i}")
        return self.norm(x)


class TemporalResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise NetConfigError(f"temporal kernel must be odd, got {kernel}")
        pad = kernel // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=pad)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=pad)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):  # (B, C, T)
        return x + self.conv2(F.gelu(self.conv1(x)))


class TemporalResNet(nn.Module):
    """Residual 1-D convolutions over time with same-length padding; (B, T, D) in and out."""

    def __init__(self, channels: int, blocks: int = 6, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise NetConfigError(f"temporal kernel must be odd, got {kernel}")
        self.blocks = nn.ModuleList(TemporalResBlock(channels, kernel) for _ in range(blocks))

    def forward(self, x, modulation=None):
        h = x.transpose(1, 2)
        for i, blk in enumerate(self.blocks):
            h = blk(h)
            if modulation is not None:
                g, b = modulation[i]
                h = film(h, g.transpose(1, 2), b.transpose(1, 2))
            check_finite(h, f"temporal block {i}")
        return h.transpose(1, 2)


class GraphConv(nn.Module):
    """Spatial graph convolution with one weight per adjacency partition."""

    def __init__(self, in_ch: int, out_ch: int, adjacency: torch.Tensor):
        super().__init__()
        A = torch.as_tensor(adjacency, dtype=torch.float32)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ShapeError("adjacency must be (K, V, V)")
        self.register_buffer("A", A)
        self.K = A.shape[0]
        self.out_ch = out_ch
        self.conv = nn.Conv2d(in_ch, out_ch * self.K, 1)

    def forward(self, x):  # (B, C, T, V)
        B, _, T, V = x.shape
        h = self.conv(x).reshape(B, self.K, self.out_ch, T, V)
        return torch.einsum("bkctv,kvw->bctw", h, self.A)


class TemporalGraphConv(nn.Module):
    """Convolution along time applied to every graph node independently."""

    def __init__(self, channels: int, kernel: int = 9, stride: int = 1):
        super().__init__()
        if kernel % 2 == 0:
            raise NetConfigError(f"temporal kernel must be odd, got {kernel}")
        self.conv = nn.Conv2d(channels, channels, (kernel, 1), (stride, 1), (kernel // 2, 0))

    def forward(self, x):
        return self.conv(x)
