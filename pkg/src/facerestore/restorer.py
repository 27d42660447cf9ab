"""Restoration network: multi-scale encoder, dictionary lookup, cross-attention fusion, decoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .attention import AttentionConfig, FusionStack
from .blocks import Decoder, Encoder, PatchDiscriminator
from .config import ArchConfig, Config
from .errors import ContractError, DimensionError
from .losses import (
    ComponentRegion,
    SurrogateFeatureNet,
    adversarial_losses,
    check_finite,
    identity_loss,
    l1_loss,
    perceptual_loss,
    prior_loss,
    total_restorer_loss,
)
from .rohqd import Codebook, VQAutoencoder, quantize, straight_through
from .tensor_core import DTYPE


@dataclass
class RestorationTrace:
    degraded: list[torch.Tensor]  # Z_d^s, smallest scale first
    fused: list[torch.Tensor]  # Z_p^0 (dictionary lookup) .. Z_p^S
    indices: torch.Tensor  # (B, H', W') chosen dictionary rows
    st_offset: torch.Tensor  # quantized - Z_d^0, detached
    attention: list[torch.Tensor | None] = field(default_factory=list)  # per scale, last block

    @property
    def quantized(self) -> torch.Tensor:
        return self.fused[0]


class RestorerModel(nn.Module):
    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        arch.validate()
        torch.manual_seed(seed)
        self.arch = arch
        self.encoder = Encoder(arch.widths, arch.blocks_per_level, arch.codebook_dim)
        self.decoder = Decoder(arch.widths, arch.blocks_per_level, arch.codebook_dim)
        self.codebook = Codebook(
            arch.codebook_size, arch.codebook_dim, trainable=False, generator=torch.Generator().manual_seed(seed)
        )
        self.fusion = nn.ModuleList(
            FusionStack(AttentionConfig(self.scale_channels(s), arch.num_heads), arch.mhca_per_scale)
            for s in range(arch.scales)
        )
        self.to(DTYPE)

    def scale_channels(self, s: int) -> int:
        return self.arch.codebook_dim if s == 0 else self.arch.widths[self.arch.n_down - s]

    @classmethod
    def from_rohqd(cls, arch: ArchConfig, vq: VQAutoencoder, seed: int = 0) -> "RestorerModel":
        """Start from a trained dictionary autoencoder; the codebook is copied and frozen."""
        model = cls(arch, seed=seed)
        model.encoder.load_state_dict(vq.encoder.state_dict())
        model.decoder.load_state_dict(vq.decoder.state_dict())
        with torch.no_grad():
            model.codebook.weight.copy_(vq.codebook.weight)
        model.codebook.trainable = False
        return model

    def encode_multi_scale(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Z_d^0 .. Z_d^{S-1} (smallest first) and the raw per-level encoder features."""
        size = self.arch.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise DimensionError(f"expected N x 3 x {size} x {size} input, got {tuple(x.shape)}")
        z0, feats = self.encoder.forward_levels(x)
        n = self.arch.n_down
        return [z0] + [feats[n - s] for s in range(1, self.arch.scales)], feats

    def forward(
        self, x: torch.Tensor, st_offset: torch.Tensor | None = None, keep_attention: bool = False
    ) -> tuple[torch.Tensor, RestorationTrace]:
        zd, feats = self.encode_multi_scale(x)
        res = quantize(zd[0], self.codebook)
        offset = (res.quantized - zd[0]).detach()
        z_p = straight_through(zd[0], res, st_offset)
        for stack in self.fusion:
            for block in stack.blocks:
                block.keep_attention = keep_attention
        fused = [res.quantized]
        attention = []

        def fuse(s: int, z_p: torch.Tensor) -> torch.Tensor:
            out = self.fusion[s](zd[s], z_p)
            fused.append(out)
            attention.append(self.fusion[s].blocks[-1].last_attention)
            return out

        z = fuse(0, z_p)
        n = self.arch.n_down

        def hook(level: int, h: torch.Tensor) -> torch.Tensor:
            s = n - level
            if s < self.arch.scales:
                return fuse(s, h)
            if self.arch.decoder_skips:
                return h + feats[level]
            return h

        out = self.decoder(z, hook)
        return out, RestorationTrace(zd, fused, res.indices, offset, attention)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(DTYPE)


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()


def restore(img: np.ndarray, model: RestorerModel, keep_attention: bool = False) -> tuple[np.ndarray, RestorationTrace]:
    """Restore one image (H, W, 3) or a batch (N, H, W, 3) with values in [0, 1]."""
    single = np.asarray(img).ndim == 3
    with torch.no_grad():
        out, trace = model(to_tensor(img), keep_attention=keep_attention)
    out = to_images(out)
    return (out[0] if single else out), trace


class LossSuite(nn.Module):
    """Frozen extractors plus trainable discriminators used by the restorer objective."""

    def __init__(self, cfg: Config):
        super().__init__()
        torch.manual_seed(cfg.seed + 1)
        self.per_net = SurrogateFeatureNet("perceptual", seed=cfg.surrogate_seed)
        self.id_net = SurrogateFeatureNet("identity", seed=cfg.surrogate_seed)
        self.regions = tuple(ComponentRegion(name, tuple(box)) for name, box in cfg.regions.items())
        self.crop_size = cfg.arch.crop_size
        self.disc = PatchDiscriminator(width=cfg.arch.disc_width, n_layers=cfg.arch.disc_layers)
        self.comp_discs = nn.ModuleDict(
            {r.name: PatchDiscriminator(width=cfg.arch.disc_width, n_layers=cfg.arch.comp_disc_layers) for r in self.regions}
        )
        self.disc.to(DTYPE)
        self.comp_discs.to(DTYPE)

    def discriminator_parameters(self):
        return list(self.disc.parameters()) + list(self.comp_discs.parameters())

    def terms(self, out: torch.Tensor, clean: torch.Tensor, trace: RestorationTrace, weights) -> tuple[dict, torch.Tensor]:
        """Generator terms keyed as in the objective, plus the summed discriminator loss."""
        zero = torch.zeros((), dtype=out.dtype)
        adv_d = adv_g = comp_d = comp_g = zero
        if weights.adv > 0 or weights.comp > 0:
            adv_d, adv_g, comp_d, comp_g = adversarial_losses(
                out,
                clean,
                self.disc if weights.adv > 0 else None,
                self.regions if weights.comp > 0 else (),
                self.comp_discs,
                self.crop_size,
            )
        terms = {
            "l1": l1_loss(out, clean),
            "per": perceptual_loss(out, clean, self.per_net),
            "p": prior_loss(trace.degraded[0], trace.quantized),
            "adv": adv_g,
            "comp": comp_g,
            "id": identity_loss(out, clean, self.id_net),
        }
        return terms, adv_d + comp_d


@dataclass
class RestorerTrainResult:
    model: RestorerModel
    losses: LossSuite
    log: list[dict]
    step: int


def train_restorer(
    degraded: np.ndarray,
    clean: np.ndarray,
    model: RestorerModel,
    cfg: Config,
    steps: int | None = None,
    log_path: str | Path | None = None,
    snapshot: Callable[[int, RestorerModel], None] | None = None,
) -> RestorerTrainResult:
    """Optimize the restorer on (degraded, clean) pairs with the dictionary frozen.

    Generator and discriminators are updated once per step from the same
    forward pass. One log record per step carries the six terms and the total.
    """
    if len(degraded) == 0 or len(degraded) != len(clean):
        raise ContractError("need a non-empty set of (degraded, clean) pairs")
    if model.codebook.trainable:
        raise ContractError("the dictionary must be frozen while training the restorer")
    steps = cfg.train.steps if steps is None else steps
    w = cfg.weights
    x_all, y_all = to_tensor(degraded), to_tensor(clean)
    suite = LossSuite(cfg)
    gen_params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(gen_params, lr=cfg.train.lr, betas=cfg.train.betas)
    opt_d = torch.optim.Adam(suite.discriminator_parameters(), lr=cfg.train.lr, betas=cfg.train.betas)
    rng = np.random.default_rng(cfg.seed)
    records = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, steps + 1):
            idx = np.sort(rng.choice(len(x_all), size=min(cfg.train.batch_size, len(x_all)), replace=False))
            x, y = x_all[idx], y_all[idx]
            out, trace = model(x)
            terms, d_loss = suite.terms(out, y, trace, w)
            check_finite(terms, step)
            total = total_restorer_loss(terms, w)
            opt.zero_grad()
            total.backward()
            opt.step()
            if d_loss.requires_grad:
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            rec = {"step": step, **{k: float(v.detach()) for k, v in terms.items()}, "total": float(total.detach())}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if snapshot is not None and cfg.train.sample_every and step % cfg.train.sample_every == 0:
                snapshot(step, model)
    finally:
        if fh is not None:
            fh.close()
    return RestorerTrainResult(model, suite, records, steps)
