"""Finite-difference gradient suite over every differentiable op and composite block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch

from . import tensor_core as tc
from .attention import AttentionConfig, MultiHeadCrossAttention, mhsa_forward
from .blocks import FeedForward, PatchDiscriminator, ResidualBlock
from .config import ArchConfig, toy_config
from .losses import (
    LossWeights,
    SurrogateFeatureNet,
    crop_region,
    identity_loss,
    perceptual_loss,
    prior_loss,
)
from .rohqd import Codebook, codebook_loss, commitment_loss, quantize, straight_through
from .tensor_core import DTYPE

SMOOTH_TOL = 1e-6
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.error:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)"


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def _params(module: torch.nn.Module) -> list[torch.Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


def _randomize(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def tiny_restorer_arch() -> ArchConfig:
    """8x8 input, one downsampling, both scales fused."""
    return ArchConfig(
        image_size=8,
        widths=(4, 8),
        blocks_per_level=(1, 1),
        scales=2,
        mhca_per_scale=2,
        num_heads=2,
        codebook_size=8,
        codebook_dim=4,
        disc_width=4,
        disc_layers=2,
        comp_disc_layers=1,
        crop_size=4,
    )


def restorer_loss_check(gen: torch.Generator, max_coords: int = 4) -> float:
    """Full restorer objective (adversarial weight 0) w.r.t. input image and all parameters.

    The straight-through offset is frozen at the evaluation point, so the
    numerical side differentiates exactly the function the estimator's
    gradient belongs to.
    """
    from .restorer import LossSuite, RestorerModel

    arch = tiny_restorer_arch()
    cfg = toy_config().replace(arch=arch, weights=LossWeights(adv=0.0))
    model = RestorerModel(arch, seed=3)
    with torch.no_grad():
        model.codebook.weight.copy_(_rand(gen, arch.codebook_size, arch.codebook_dim) * 0.5)
    suite = LossSuite(cfg)
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=DTYPE)
    y = torch.rand(2, 3, 8, 8, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        _, trace = model(x)
    offset = trace.st_offset

    def loss(*_):
        out, tr = model(x, st_offset=offset)
        terms, _ = suite.terms(out, y, tr, cfg.weights)
        from .losses import total_restorer_loss

        return total_restorer_loss(terms, cfg.weights)

    return tc.grad_check(loss, [x] + _params(model), max_coords=max_coords, seed=1)


def build_checks(seed: int = 0) -> list[tuple[str, float, Callable[[], float]]]:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    checks = []

    def add(name, tol):
        def deco(fn):
            checks.append((name, tol, fn))
            return fn

        return deco

    @add("matmul", SMOOTH_TOL)
    def _():
        a, b = _rand(gen, 3, 4), _rand(gen, 4, 2)
        w = _rand(gen, 3, 2)
        return tc.grad_check(lambda a, b: (tc.matmul(a, b) * w).sum(), [a, b])

    @add("softmax", SMOOTH_TOL)
    def _():
        x, w = _rand(gen, 5), _rand(gen, 5)
        return tc.grad_check(lambda x: (tc.softmax(x, 0) * w).sum(), x)

    @add("layer_norm", SMOOTH_TOL)
    def _():
        x, g, b = _rand(gen, 2, 6, 3, 3), _rand(gen, 6), _rand(gen, 6)
        w = _rand(gen, 2, 6, 3, 3)
        return tc.grad_check(lambda x, g, b: (tc.layer_norm(x, g, b) * w).sum(), [x, g, b])

    @add("conv2d", DEFAULT_TOL)
    def _():
        x, k, b = _rand(gen, 1, 4, 5, 5), _rand(gen, 2, 4, 3, 3), _rand(gen, 2)
        w = _rand(gen, 1, 2, 5, 5)
        return tc.grad_check(lambda x, k, b: (tc.conv2d(x, k, b, padding=1) * w).sum(), [x, k, b])

    @add("resample_nearest", DEFAULT_TOL)
    def _():
        x = _rand(gen, 1, 2, 4, 4)
        wu, wd = _rand(gen, 1, 2, 8, 8), _rand(gen, 1, 2, 2, 2)
        return tc.grad_check(
            lambda x: (tc.resample_nearest(x, 2, "up") * wu).sum() + (tc.resample_nearest(x, 2, "down") * wd).sum(), x
        )

    @add("roi_crop", DEFAULT_TOL)
    def _():
        x = _rand(gen, 1, 3, 8, 8)
        w = _rand(gen, 1, 3, 4, 4)
        return tc.grad_check(lambda x: (crop_region(x, (0.2, 0.3, 0.7, 0.9), 4) * w).sum(), x)

    @add("residual_block", DEFAULT_TOL)
    def _():
        block = ResidualBlock(4, 8).to(DTYPE)
        _randomize(block, gen)
        x = _rand(gen, 1, 4, 8, 8)
        w = _rand(gen, 1, 8, 8, 8)
        return tc.grad_check(lambda *_: (block(x) * w).sum(), [x] + _params(block), max_coords=20)

    @add("ffn", DEFAULT_TOL)
    def _():
        ffn = FeedForward(4).to(DTYPE)
        _randomize(ffn, gen)
        x = _rand(gen, 1, 4, 6, 6)
        w = _rand(gen, 1, 4, 6, 6)
        return tc.grad_check(lambda *_: (ffn(x) * w).sum(), [x] + _params(ffn), max_coords=20)

    @add("mhsa", DEFAULT_TOL)
    def _():
        blk = MultiHeadCrossAttention(AttentionConfig(8, 2)).to(DTYPE)
        _randomize(blk, gen)
        x = _rand(gen, 1, 8, 3, 3)
        w = _rand(gen, 1, 8, 3, 3)
        return tc.grad_check(lambda *_: (mhsa_forward(blk, x) * w).sum(), [x] + _params(blk), max_coords=20)

    @add("mhca", DEFAULT_TOL)
    def _():
        blk = MultiHeadCrossAttention(AttentionConfig(8, 2)).to(DTYPE)
        _randomize(blk, gen)
        zd, zp = _rand(gen, 1, 8, 3, 3), _rand(gen, 1, 8, 3, 3)
        w = _rand(gen, 1, 8, 3, 3)
        return tc.grad_check(lambda *_: (blk(zd, zp) * w).sum(), [zd, zp] + _params(blk), max_coords=20)

    @add("patch_discriminator", DEFAULT_TOL)
    def _():
        d = PatchDiscriminator(width=4, n_layers=2).to(DTYPE)
        _randomize(d, gen)
        x = _rand(gen, 1, 3, 8, 8)
        return tc.grad_check(lambda *_: d(x).sum(), [x] + _params(d), max_coords=20)

    @add("vq_losses", DEFAULT_TOL)
    def _():
        # stop-gradient arguments are frozen at the evaluation point: same
        # autograd result, and the central difference then sees a constant
        book = Codebook(6, 4)
        with torch.no_grad():
            book.weight.copy_(_rand(gen, 6, 4))
        z = _rand(gen, 1, 4, 3, 3)
        res = quantize(z, book)
        z0, zq0 = z.clone(), res.quantized.detach().clone()
        offset = zq0 - z0
        idx = res.indices.reshape(-1)

        def f(z, wbook):
            zq = wbook[idx].reshape(1, 3, 3, 4).permute(0, 3, 1, 2)
            st = straight_through(z, res, offset)
            return codebook_loss(z0, zq) + 0.25 * commitment_loss(z, zq0) + (st**2).sum() + prior_loss(z, zq0)

        return tc.grad_check(f, [z, book.weight])

    @add("perceptual_identity", DEFAULT_TOL)
    def _():
        per = SurrogateFeatureNet("perceptual", seed=1)
        idn = SurrogateFeatureNet("identity", seed=1)
        x, y = torch.rand(1, 3, 8, 8, generator=gen, dtype=DTYPE), torch.rand(1, 3, 8, 8, generator=gen, dtype=DTYPE)
        return tc.grad_check(lambda x: perceptual_loss(x, y, per) + identity_loss(x, y, idn), x)

    @add("restorer_loss", DEFAULT_TOL)
    def _():
        return restorer_loss_check(gen)

    return checks


def run_suite(seed: int = 0, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name, tol, fn in build_checks(seed):
        t0 = time.perf_counter()
        err = fn()
        res = CheckResult(name, err, tol, time.perf_counter() - t0)
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results
