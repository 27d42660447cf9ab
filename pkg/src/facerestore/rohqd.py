"""Learned high-quality dictionary: codebook, nearest-element quantization, and the VQ autoencoder stage."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .blocks import Decoder, Encoder, PatchDiscriminator
from .errors import ContractError, DimensionError
from .tensor_core import DTYPE

log = logging.getLogger(__name__)

# elements per distance block in the linear scan
_SCAN_BUDGET = 1 << 22


class Codebook(nn.Module):
    """``num_elements`` row vectors of length ``dim``; initialized uniform in [-1/M, 1/M]."""

    def __init__(self, num_elements: int, dim: int, trainable: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        if num_elements < 1 or dim < 1:
            raise ContractError("codebook needs at least one element of positive length")
        w = torch.empty(num_elements, dim, dtype=DTYPE)
        w.uniform_(-1.0 / num_elements, 1.0 / num_elements, generator=generator)
        self.weight = nn.Parameter(w, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.weight.requires_grad_(flag)
        if not flag:
            self.weight.grad = None

    @property
    def num_elements(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class QuantizeResult:
    quantized: torch.Tensor  # (B, C, H, W), rows copied from the codebook
    indices: torch.Tensor  # (B, H, W) int64
    distances: torch.Tensor  # (B, H, W) squared distance to the chosen element


def quantize(z: torch.Tensor, book: Codebook | torch.Tensor) -> QuantizeResult:
    """Replace every position of ``z`` (B, C, H, W) by its nearest codebook row.

    Distances are exact squared Euclidean distances; ties go to the lowest index
    (``torch.argmin`` returns the first minimum). ``quantized`` stays
    differentiable with respect to the codebook rows it selected.
    """
    weight = book.weight if isinstance(book, Codebook) else book
    if z.dim() != 4 or z.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"feature map {tuple(z.shape)} does not match codebook element length {weight.shape[1]}"
        )
    b, c, h, w = z.shape
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, c)
    book = weight.detach()
    chunk = max(1, _SCAN_BUDGET // (book.shape[0] * c))
    idx_parts, dist_parts = [], []
    for start in range(0, flat.shape[0], chunk):
        diff = flat[start : start + chunk, None, :] - book[None, :, :]
        d2 = (diff * diff).sum(-1)
        i = torch.argmin(d2, dim=1)
        idx_parts.append(i)
        dist_parts.append(d2.gather(1, i[:, None]).squeeze(1))
    idx = torch.cat(idx_parts)
    dist = torch.cat(dist_parts)
    zq = weight[idx].reshape(b, h, w, c).permute(0, 3, 1, 2)
    return QuantizeResult(zq, idx.reshape(b, h, w), dist.reshape(b, h, w))


def straight_through(z: torch.Tensor, result: QuantizeResult, offset: torch.Tensor | None = None) -> torch.Tensor:
    """Forward value is the quantized map; backward copies the gradient to ``z``.

    ``offset`` replaces ``quantized - z`` by a fixed tensor. The estimator's
    gradient is the exact derivative of ``z + offset``, which is what the
    finite-difference checks need to probe.
    """
    if offset is None:
        offset = result.quantized - z
    return z + offset.detach()


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def codebook_loss(z_h: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
    """Mean of ``(sg[z_h] - z_p)^2``; moves the selected codebook rows."""
    _same_shape(z_h, z_p)
    return ((z_h.detach() - z_p) ** 2).mean()


def commitment_loss(z_h: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
    """Mean of ``(z_h - sg[z_p])^2``; moves the encoder only."""
    _same_shape(z_h, z_p)
    return ((z_h - z_p.detach()) ** 2).mean()


class VQAutoencoder(nn.Module):
    """High-quality encoder, codebook and decoder trained as an image autoencoder."""

    def __init__(self, arch, generator_seed: int = 0):
        super().__init__()
        torch.manual_seed(generator_seed)
        self.arch = arch
        self.encoder = Encoder(arch.widths, arch.blocks_per_level, arch.codebook_dim)
        self.decoder = Decoder(arch.widths, arch.blocks_per_level, arch.codebook_dim)
        gen = torch.Generator().manual_seed(generator_seed)
        self.codebook = Codebook(arch.codebook_size, arch.codebook_dim, trainable=True, generator=gen)
        self.to(DTYPE)

    def forward(self, img: torch.Tensor):
        z_h = self.encoder(img)
        res = quantize(z_h, self.codebook)
        out = self.decoder(straight_through(z_h, res))
        return out, z_h, res


@dataclass
class RohqdTrainResult:
    model: VQAutoencoder
    discriminator: PatchDiscriminator | None
    log: list[dict]
    step: int


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(DTYPE)


def train_rohqd(
    images: np.ndarray,
    cfg,
    steps: int | None = None,
    log_path: str | Path | None = None,
    on_step: Callable[[int, dict], None] | None = None,
    snapshot: Callable[[int, VQAutoencoder], None] | None = None,
    snapshot_every: int = 0,
) -> RohqdTrainResult:
    """Train the dictionary autoencoder on clean images (N, H, W, 3) in [0, 1].

    Objective: ``l1 + w.per*per + w.adv*adv + w.d*codebook + w.c*commitment``.
    Every step appends one record with all five terms and the total.
    """
    from .losses import (
        SurrogateFeatureNet,
        check_finite,
        discriminator_loss,
        generator_loss,
        l1_loss,
        perceptual_loss,
    )

    if len(images) == 0:
        raise ContractError("ROHQD training needs a non-empty dataset")
    steps = cfg.train.steps if steps is None else steps
    w = cfg.weights
    data = _to_tensor(np.asarray(images, dtype=np.float64))
    model = VQAutoencoder(cfg.arch, generator_seed=cfg.seed)
    per_net = SurrogateFeatureNet("perceptual", seed=cfg.surrogate_seed)
    disc = None
    opt_d = None
    if w.adv > 0:
        torch.manual_seed(cfg.seed + 1)
        disc = PatchDiscriminator(width=cfg.arch.disc_width, n_layers=cfg.arch.disc_layers).to(DTYPE)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.train.lr, betas=cfg.train.betas)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.train.lr, betas=cfg.train.betas
    )
    rng = np.random.default_rng(cfg.seed)
    records = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, steps + 1):
            idx = rng.choice(len(data), size=min(cfg.train.batch_size, len(data)), replace=False)
            batch = data[np.sort(idx)]
            out, z_h, res = model(batch)
            adv = torch.zeros((), dtype=DTYPE)
            if disc is not None:
                d_loss = discriminator_loss(disc(batch), disc(out.detach()))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                adv = generator_loss(disc(out))
            terms = {
                "l1": l1_loss(out, batch),
                "per": perceptual_loss(out, batch, per_net),
                "adv": adv,
                "d": codebook_loss(z_h, res.quantized),
                "c": commitment_loss(z_h, res.quantized),
            }
            check_finite(terms, step)
            total = terms["l1"] + w.per * terms["per"] + w.d * terms["d"] + w.c * terms["c"]
            if w.adv > 0:
                total = total + w.adv * terms["adv"]
            opt.zero_grad()
            total.backward()
            opt.step()
            rec = {"step": step, **{k: float(v.detach()) for k, v in terms.items()}, "total": float(total.detach())}
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, rec)
            if snapshot is not None and snapshot_every and step % snapshot_every == 0:
                snapshot(step, model)
    finally:
        if fh is not None:
            fh.close()
    return RohqdTrainResult(model, disc, records, steps)


def codebook_utilization(model: VQAutoencoder, images: np.ndarray) -> int:
    """Number of distinct codebook rows selected over ``images``."""
    with torch.no_grad():
        z = model.encoder(_to_tensor(np.asarray(images, dtype=np.float64)))
        return int(torch.unique(quantize(z, model.codebook).indices).numel())
