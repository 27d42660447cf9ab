"""Multi-head self- and cross-attention over flattened spatial positions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import FeedForward
from .errors import ConfigError, DimensionError
from .tensor_core import layer_norm, matmul, softmax


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    num_heads: int = 4

    def __post_init__(self):
        if self.channels < 1 or self.num_heads < 1 or self.channels % self.num_heads:
            raise ConfigError(
                f"channels ({self.channels}) must be a positive multiple of num_heads ({self.num_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


def split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, heads, H*W, C/heads); head i owns channels [i*Ch, (i+1)*Ch)."""
    b, c, h, w = x.shape
    if c % num_heads:
        raise ConfigError(f"{c} channels cannot be split into {num_heads} heads")
    return x.reshape(b, num_heads, c // num_heads, h * w).transpose(2, 3)


def merge_heads(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`split_heads`: concatenate heads along channels."""
    b, n, hw, ch = x.shape
    if hw != height * width:
        raise DimensionError(f"{hw} positions do not form a {height}x{width} map")
    return x.transpose(2, 3).reshape(b, n * ch, height, width)


class MultiHeadCrossAttention(nn.Module):
    """Queries from ``z_d``; keys and values from ``z_kv``.

    ``forward(z_d, z_kv)`` returns ``FFN(LN(Z_mh + z_kv))`` -- the residual
    adds the key/value side. Self-attention is the special case
    ``z_kv = z_d`` (see :class:`MultiHeadSelfAttention`).
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.q = nn.Conv2d(c, c, 1)
        self.k = nn.Conv2d(c, c, 1)
        self.v = nn.Conv2d(c, c, 1)
        self.ln_gain = nn.Parameter(torch.ones(c))
        self.ln_bias = nn.Parameter(torch.zeros(c))
        self.ffn = FeedForward(c)
        self.last_attention: torch.Tensor | None = None
        self.keep_attention = False

    def attend(self, z_q: torch.Tensor, z_kv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Multi-head attention output ``Z_mh`` and the weights (B, heads, HW_q, HW_kv)."""
        c = self.cfg.channels
        if z_q.dim() != 4 or z_q.shape[1] != c:
            raise DimensionError(f"query map must be N x {c} x H x W, got {tuple(z_q.shape)}")
        if z_kv.shape != z_q.shape:
            raise DimensionError(f"query map {tuple(z_q.shape)} and key/value map {tuple(z_kv.shape)} differ")
        n = self.cfg.num_heads
        h, w = z_q.shape[2:]
        q = split_heads(self.q(z_q), n)
        k = split_heads(self.k(z_kv), n)
        v = split_heads(self.v(z_kv), n)
        scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(self.cfg.head_dim)
        weights = softmax(scores, axis=-1)
        return merge_heads(matmul(weights, v), h, w), weights

    def forward(self, z_d: torch.Tensor, z_kv: torch.Tensor) -> torch.Tensor:
        z_mh, weights = self.attend(z_d, z_kv)
        self.last_attention = weights.detach() if self.keep_attention else None
        return self.ffn(layer_norm(z_mh + z_kv, self.ln_gain, self.ln_bias))


class MultiHeadSelfAttention(MultiHeadCrossAttention):
    def forward(self, z_d: torch.Tensor, z_kv: torch.Tensor | None = None) -> torch.Tensor:
        return super().forward(z_d, z_d)


def mhsa_forward(block: MultiHeadCrossAttention, z_d: torch.Tensor) -> torch.Tensor:
    return MultiHeadCrossAttention.forward(block, z_d, z_d)


def mhca_forward(block: MultiHeadCrossAttention, z_d: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
    return MultiHeadCrossAttention.forward(block, z_d, z_p)


class FusionStack(nn.Module):
    """K chained cross-attention blocks sharing the same degraded-side input."""

    def __init__(self, cfg: AttentionConfig, depth: int):
        super().__init__()
        if depth < 1:
            raise ConfigError("fusion depth must be >= 1")
        self.blocks = nn.ModuleList(MultiHeadCrossAttention(cfg) for _ in range(depth))

    def forward(self, z_d: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            z_p = block(z_d, z_p)
        return z_p
