"""Training losses and the frozen surrogate feature extractors they use.

The perceptual and identity networks are fixed-seed random conv stacks that
stand in for pretrained VGG-19 / ArcFace features: they keep every gradient
path and loss contract without bundling pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import LEAKY_SLOPE, PatchDiscriminator
from .errors import ConfigError, ContractError, DimensionError, NonFiniteLossError
from .tensor_core import DTYPE

STAGE_WIDTHS = (8, 16, 16, 32, 32)


class SurrogateFeatureNet(nn.Module):
    """Frozen random conv stack exposing five feature stages.

    ``variant="perceptual"`` returns the list of stage activations;
    ``variant="identity"`` pools the last stage and projects it to an
    embedding vector of length ``embed_dim``.
    """

    def __init__(self, variant: str = "perceptual", seed: int = 0, embed_dim: int = 32, in_channels: int = 3):
        super().__init__()
        if variant not in ("perceptual", "identity"):
            raise ConfigError(f"unknown surrogate variant {variant!r}")
        self.variant = variant
        gen = torch.Generator().manual_seed(seed + (0 if variant == "perceptual" else 7919))
        convs = []
        ch = in_channels
        for i, out in enumerate(STAGE_WIDTHS):
            conv = nn.Conv2d(ch, out, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            convs.append(conv)
            ch = out
        self.stages = nn.ModuleList(convs)
        self.embed = None
        if variant == "identity":
            self.embed = nn.Linear(ch, embed_dim)
            with torch.no_grad():
                self.embed.weight.copy_(torch.randn(self.embed.weight.shape, generator=gen) / math.sqrt(ch))
                self.embed.bias.zero_()
        self.to(DTYPE)
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor):
        feats = self.features(x)
        if self.variant == "perceptual":
            return feats
        return self.embed(feats[-1].mean(dim=(2, 3)))


@dataclass(frozen=True)
class ComponentRegion:
    name: str
    box: tuple[float, float, float, float]  # x0, y0, x1, y1 as fractions of width/height

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ContractError(f"degenerate or out-of-image box for {self.name}: {self.box}")


DEFAULT_REGIONS = (
    ComponentRegion("left_eye", (0.20, 0.30, 0.45, 0.50)),
    ComponentRegion("right_eye", (0.55, 0.30, 0.80, 0.50)),
    ComponentRegion("mouth", (0.30, 0.62, 0.70, 0.82)),
)


def crop_region(img: torch.Tensor, region: ComponentRegion | Sequence[float], size: int = 32) -> torch.Tensor:
    """Bilinear ROI-align crop of a fractional box to ``size x size``.

    Samples sit at bin centres, using the half-pixel convention and clamping
    at the borders, so the box (0, 0, 1, 1) reproduces a plain bilinear resize.
    """
    if not isinstance(region, ComponentRegion):
        region = ComponentRegion("box", tuple(region))
    x0, y0, x1, y1 = region.box
    n = img.shape[0]
    t = (torch.arange(size, dtype=img.dtype) + 0.5) / size
    # normalized grid coordinates with align_corners=False: pixel-edge fraction u -> 2u - 1
    gx = 2.0 * (x0 + t * (x1 - x0)) - 1.0
    gy = 2.0 * (y0 + t * (y1 - y0)) - 1.0
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)
    grid = grid.unsqueeze(0).expand(n, size, size, 2)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, net: SurrogateFeatureNet) -> torch.Tensor:
    """Sum over the five stages of the mean squared feature difference."""
    _same_shape(pred, target)
    loss = torch.zeros((), dtype=pred.dtype)
    for fp, ft in zip(net(pred), net(target)):
        loss = loss + ((fp - ft) ** 2).mean()
    return loss


def prior_loss(z_d0: torch.Tensor, z_p0: torch.Tensor) -> torch.Tensor:
    """Mean squared distance from encoder features to their (constant) selected priors."""
    _same_shape(z_d0, z_p0)
    return ((z_p0.detach() - z_d0) ** 2).mean()


def identity_loss(pred: torch.Tensor, target: torch.Tensor, id_net: SurrogateFeatureNet) -> torch.Tensor:
    """Squared distance between identity embeddings, averaged over the batch."""
    _same_shape(pred, target)
    return ((id_net(pred) - id_net(target)) ** 2).sum(dim=1).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``-[log D(real) + log(1 - D(fake))]`` averaged over patches, in softplus form."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term ``-log D(fake)``."""
    return F.softplus(-fake_logits).mean()


def adversarial_losses(
    pred: torch.Tensor,
    target: torch.Tensor,
    disc: PatchDiscriminator | None,
    components: Sequence[ComponentRegion] = DEFAULT_REGIONS,
    comp_discs: Mapping[str, PatchDiscriminator] | None = None,
    crop_size: int = 32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Whole-image and per-region (discriminator, generator) loss pairs.

    The discriminator terms see ``pred`` detached; the generator terms
    backpropagate into ``pred``.
    """
    zero = torch.zeros((), dtype=pred.dtype)
    adv_d = adv_g = zero
    if disc is not None:
        adv_d = discriminator_loss(disc(target), disc(pred.detach()))
        adv_g = generator_loss(disc(pred))
    comp_d = comp_g = zero
    for region in components:
        d_r = comp_discs[region.name]
        real = crop_region(target, region, crop_size)
        fake = crop_region(pred, region, crop_size)
        comp_d = comp_d + discriminator_loss(d_r(real), d_r(fake.detach()))
        comp_g = comp_g + generator_loss(d_r(fake))
    return adv_d, adv_g, comp_d, comp_g


@dataclass(frozen=True)
class LossWeights:
    per: float = 1.0
    p: float = 0.25
    adv: float = 0.8
    comp: float = 1.0
    id: float = 1.0
    d: float = 1.0
    c: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


RESTORER_TERMS = ("l1", "per", "p", "adv", "comp", "id")


def total_restorer_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights) -> torch.Tensor | float:
    """``l1 + per*w.per + p*w.p + adv*w.adv + comp*w.comp + id*w.id``.

    Terms with a zero weight are left out of the graph entirely.
    """
    total = terms["l1"]
    for name in RESTORER_TERMS[1:]:
        lam = getattr(weights, name)
        if lam < 0:
            raise ConfigError(f"negative weight for {name}")
        if lam != 0:
            total = total + lam * terms[name]
    return total


def check_finite(terms: Mapping[str, torch.Tensor], step: int | None = None) -> None:
    for name, value in terms.items():
        if not math.isfinite(float(value.detach()) if isinstance(value, torch.Tensor) else float(value)):
            raise NonFiniteLossError(name, step)
