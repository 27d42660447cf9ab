"""PSNR, SSIM and identity distance (IDD)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ContractError, DimensionError

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ LUMA
    return img


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    rows = sum(k[i] * x[i : x.shape[0] - n + 1 + i] for i in range(n))
    return sum(k[i] * rows[:, i : rows.shape[1] - n + 1 + i] for i in range(n))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean single-scale SSIM on luma with an 11-tap Gaussian window (sigma 1.5, valid region)."""
    _check_pair(np.asarray(a), np.asarray(b))
    x, y = _gray(a), _gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW} pixels per side")
    t = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    k /= k.sum()
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def angular_distance(ea: np.ndarray, eb: np.ndarray) -> float:
    ea = np.asarray(ea, dtype=np.float64).ravel()
    eb = np.asarray(eb, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na == 0 or nb == 0:
        raise ContractError("identity embedding has zero norm")
    if np.array_equal(ea, eb):
        return 0.0
    cos = float(np.dot(ea / na, eb / nb))
    return math.acos(min(1.0, max(-1.0, cos)))


def embed_image(img: np.ndarray, id_net) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float64).transpose(2, 0, 1)))[None]
    with torch.no_grad():
        return id_net(x)[0].numpy()


def idd(a: np.ndarray, b: np.ndarray, id_net: Callable | None = None, embed: Callable | None = None) -> float:
    """Angle in radians between identity embeddings of ``a`` and ``b``.

    ``embed`` maps an image to a vector directly; otherwise ``id_net`` (a
    torch module taking NCHW batches) is used.
    """
    _check_pair(np.asarray(a), np.asarray(b))
    if embed is None:
        if id_net is None:
            raise ContractError("idd needs an identity network or an embedding function")
        embed = lambda img: embed_image(img, id_net)  # noqa: E731
    return angular_distance(embed(a), embed(b))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    idd: list[float] = field(default_factory=list)

    def add(self, name: str, p: float, s: float, i: float) -> None:
        self.names.append(name)
        self.psnr.append(p)
        self.ssim.append(s)
        self.idd.append(i)

    @property
    def count(self) -> int:
        return len(self.names)

    def mean(self, metric: str) -> float:
        values = getattr(self, metric)
        return float(np.mean(values)) if values else math.nan

    def text(self) -> str:
        lines = [f"{'image':<32}\t{'psnr_db':>10}\t{'ssim':>8}\t{'idd_rad':>8}"]
        for n, p, s, i in zip(self.names, self.psnr, self.ssim, self.idd):
            lines.append(f"{n:<32}\t{p:>10.4f}\t{s:>8.5f}\t{i:>8.5f}")
        lines.append(
            f"{'# mean (n=' + str(self.count) + ')':<32}\t{self.mean('psnr'):>10.4f}\t"
            f"{self.mean('ssim'):>8.5f}\t{self.mean('idd'):>8.5f}"
        )
        return "\n".join(lines) + "\n"


def evaluate_pairs(pairs, id_net) -> MetricReport:
    """``pairs`` yields (name, restored, reference) triples."""
    report = MetricReport()
    for name, a, b in pairs:
        report.add(name, psnr(a, b), ssim(a, b), idd(a, b, id_net))
    return report
