"""Convolutional building blocks: residual blocks, FFN, encoder/decoder, patch discriminator."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .tensor_core import resample_nearest

LEAKY_SLOPE = 0.2
NORM_GROUPS = 4


def _groups(channels: int) -> int:
    g = min(NORM_GROUPS, channels)
    while channels % g:
        g -= 1
    return g


def _check_channels(x: torch.Tensor, expected: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise DimensionError(f"{who} expects N x {expected} x H x W input, got {tuple(x.shape)}")


class ResidualBlock(nn.Module):
    """``skip(x) + conv(act(norm(conv(act(norm(x))))))``; skip is a 1x1 conv when channels change."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)
        )

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.leaky_relu(self.norm1(x), LEAKY_SLOPE))
        return self.conv2(F.leaky_relu(self.norm2(h), LEAKY_SLOPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "ResidualBlock")
        return self.skip(x) + self.residual(x)


class FeedForward(nn.Module):
    """Two 3x3 convolutions with a leaky rectifier between them."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "FeedForward")
        return self.conv2(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))


def _level_blocks(in_ch: int, out_ch: int, n: int) -> nn.Sequential:
    blocks = [ResidualBlock(in_ch, out_ch)] if n > 0 else []
    blocks += [ResidualBlock(out_ch) for _ in range(n - 1)]
    if n == 0 and in_ch != out_ch:
        blocks = [nn.Conv2d(in_ch, out_ch, 1)]
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    """Image -> latent map, with the features of every resolution level kept.

    Level ``i`` runs at ``H / 2**i`` with ``widths[i]`` channels; there are
    ``len(widths) - 1`` nearest downsampling steps. The bottleneck is projected
    to ``latent_channels`` by a 1x1 conv.
    """

    def __init__(
        self,
        widths: Sequence[int],
        blocks_per_level: Sequence[int],
        latent_channels: int,
        in_channels: int = 3,
    ):
        super().__init__()
        if len(widths) != len(blocks_per_level):
            raise ConfigError("widths and blocks_per_level must have the same length")
        self.widths = list(widths)
        self.n_down = len(widths) - 1
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.levels = nn.ModuleList(
            _level_blocks(widths[max(i - 1, 0)], widths[i], n) for i, n in enumerate(blocks_per_level)
        )
        self.to_latent = nn.Conv2d(widths[-1], latent_channels, 1)

    def forward_levels(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the latent map and per-level features (full resolution first)."""
        factor = 2**self.n_down
        if x.dim() != 4 or x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(f"input extent {tuple(x.shape)} not divisible by {factor}")
        h = self.conv_in(x)
        feats = []
        for i, level in enumerate(self.levels):
            if i > 0:
                h = resample_nearest(h, 2, "down")
            h = level(h)
            feats.append(h)
        return self.to_latent(h), feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_levels(x)[0]


Hook = Callable[[int, torch.Tensor], torch.Tensor]


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`: latent map -> image.

    ``hook(level, h)`` is called after the first block of each level below the
    bottleneck (and on the bottleneck input) so callers can fuse features into
    the decoding pathway.
    """

    def __init__(
        self,
        widths: Sequence[int],
        blocks_per_level: Sequence[int],
        latent_channels: int,
        out_channels: int = 3,
    ):
        super().__init__()
        self.widths = list(widths)
        self.n_down = len(widths) - 1
        self.from_latent = nn.Conv2d(latent_channels, widths[-1], 1)
        top = len(widths) - 1
        levels = []
        for i in range(top, -1, -1):
            src = widths[min(i + 1, top)]
            levels.append(_level_blocks(src, widths[i], blocks_per_level[i]))
        self.levels = nn.ModuleList(levels)  # bottleneck first
        self.norm_out = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, hook: Hook | None = None) -> torch.Tensor:
        h = self.from_latent(z)
        for j, level in enumerate(self.levels):
            i = self.n_down - j
            if j > 0:
                h = resample_nearest(h, 2, "up")
            if len(level) > 0:
                h = level[0](h)
            if hook is not None and j > 0:
                h = hook(i, h)
            for block in list(level)[1:]:
                h = block(h)
        return self.conv_out(F.leaky_relu(self.norm_out(h), LEAKY_SLOPE))


class PatchDiscriminator(nn.Module):
    """Strided conv stack ending in a 1-channel logit map (no output activation)."""

    def __init__(self, in_channels: int = 3, width: int = 16, n_layers: int = 4, max_width: int = 64):
        super().__init__()
        self.n_layers = n_layers
        layers: list[nn.Module] = []
        ch = in_channels
        for i in range(n_layers):
            out = min(width * 2**i, max_width)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.LeakyReLU(LEAKY_SLOPE)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    @property
    def min_size(self) -> int:
        return 2**self.n_layers

    @property
    def receptive_field(self) -> int:
        r = 1
        for _ in range(self.n_layers):
            r = (r - 1) * 2 + 4
        return r

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or min(img.shape[2:]) < self.min_size:
            raise DimensionError(
                f"discriminator needs spatial extent >= {self.min_size}, got {tuple(img.shape)}"
            )
        return self.net(img)
