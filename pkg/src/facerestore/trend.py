"""Desk-scale training-trend runs shared by the oracle recorder and the acceptance suite."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .config import ArchConfig, Config, EDMConfig, TrainConfig, toy_config
from .edm import degrade, entry_rng, sample_params, shift_image
from .metrics import psnr
from .restorer import RestorerModel, restore, train_restorer
from .rohqd import VQAutoencoder, codebook_utilization, train_rohqd
from .tensor_core import DTYPE
from .toydata import quantize_8bit, toy_faces


def rohqd_trend_config(seed: int = 0) -> Config:
    """64 images at 32x32, M=32 elements of length C=16, published loss weights and learning rate."""
    arch = ArchConfig(
        image_size=32,
        widths=(16, 16, 16),
        blocks_per_level=(1, 1, 1),
        codebook_size=32,
        codebook_dim=16,
        disc_layers=3,
        crop_size=16,
        comp_disc_layers=2,
    )
    return toy_config().replace(arch=arch, train=TrainConfig(batch_size=16, steps=200), seed=seed)


def dataset_l1(model: VQAutoencoder, images: torch.Tensor) -> float:
    with torch.no_grad():
        out, _, _ = model(images)
    return float((out - images).abs().mean())


@dataclass
class RohqdTrend:
    l1_step10: float
    l1_final: float
    utilization: int
    seconds: float

    @property
    def ratio(self) -> float:
        return self.l1_final / self.l1_step10


def run_rohqd_trend(seed: int = 0, steps: int = 200, n_images: int = 64) -> tuple[RohqdTrend, VQAutoencoder]:
    """Reconstruction L1 over the whole training set after step 10 and after the last step."""
    cfg = rohqd_trend_config(seed)
    images = quantize_8bit(toy_faces(n_images, cfg.arch.image_size, seed=seed))
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy()).to(DTYPE)
    seen = {}

    def snap(step, model):
        if step == 10:
            seen[10] = dataset_l1(model, x)

    t0 = time.perf_counter()
    res = train_rohqd(images, cfg, steps=steps, snapshot=snap, snapshot_every=10)
    trend = RohqdTrend(seen[10], dataset_l1(res.model, x), codebook_utilization(res.model, images), 0.0)
    trend.seconds = time.perf_counter() - t0
    return trend, res.model


def restorer_trend_config(seed: int = 0, lr: float = 1e-4) -> Config:
    return toy_config().replace(train=TrainConfig(lr=lr, batch_size=4, steps=300), edm=EDMConfig(), seed=seed)


def make_pairs(n: int, cfg: Config, seed: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` EDM (degraded, shifted clean) pairs from procedural faces, both on the 8-bit grid."""
    size = cfg.arch.image_size
    clean = quantize_8bit(toy_faces(n, size, seed=seed + 7919 * (offset + 1)))
    degraded, targets = [], []
    for i, img in enumerate(clean):
        p = sample_params(entry_rng(seed, offset + i), cfg.edm, size)
        degraded.append(quantize_8bit(degrade(img, p, cfg.edm.haze_value)))
        targets.append(shift_image(img, p.shift_h, p.shift_w))
    return np.stack(degraded), np.stack(targets)


@dataclass
class RestorerTrend:
    loss_step10: float
    loss_final: float
    psnr_degraded: float
    psnr_restored: float
    codebook_unchanged: bool
    seconds: float

    @property
    def ratio(self) -> float:
        return self.loss_final / self.loss_step10


def _mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


def run_restorer_trend(
    seed: int = 0,
    steps: int = 300,
    n_train: int = 64,
    n_test: int = 16,
    rohqd_steps: int = 200,
    lr: float = 1e-4,
    rohqd_lr: float = 1e-3,
) -> RestorerTrend:
    """Dictionary stage on clean faces, then the restorer on EDM pairs with the dictionary frozen."""
    t0 = time.perf_counter()
    cfg = restorer_trend_config(seed, lr)
    deg, clean = make_pairs(n_train, cfg, seed)
    test_deg, test_clean = make_pairs(n_test, cfg, seed, offset=n_train)
    vq_cfg = cfg.replace(train=dataclasses.replace(cfg.train, lr=rohqd_lr))
    vq = train_rohqd(clean, vq_cfg, steps=rohqd_steps).model
    model = RestorerModel.from_rohqd(cfg.arch, vq, seed=seed)
    before = model.codebook.weight.detach().numpy().tobytes()
    res = train_restorer(deg, clean, model, cfg, steps=steps)

    def non_adv(rec):
        return rec["l1"] + rec["per"] + rec["p"]

    window = 5  # batch-to-batch noise: average a few steps around each probe point
    early = float(np.mean([non_adv(r) for r in res.log[10 - window // 2 - 1 : 10 + window // 2]]))
    late = float(np.mean([non_adv(r) for r in res.log[-window:]]))
    restored, _ = restore(test_deg, model)
    return RestorerTrend(
        early,
        late,
        _mean_psnr(test_deg, test_clean),
        _mean_psnr(restored, test_clean),
        model.codebook.weight.detach().numpy().tobytes() == before,
        time.perf_counter() - t0,
    )


def as_dict(trend) -> dict:
    return {**asdict(trend), "ratio": trend.ratio}
