"""Degradation synthesis: shift, blur, haze, bilinear down/up, noise, JPEG, and uneven blending.

Images are float64 arrays (H, W, 3) in [0, 1]. Every sampled quantity,
including the noise seeds, lives in :class:`DegradationParams`, so replaying a
manifest entry reproduces its degraded image bit for bit.
"""

from __future__ import annotations

import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), mirrored borders; identity below sigma 0.1."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if sigma < 0.1:
        return img.copy()
    k = gaussian_kernel(sigma)
    return _correlate_axis(_correlate_axis(img, k, 0), k, 1)


def apply_haze(img: np.ndarray, alpha: float, haze_value: float = 1.0) -> np.ndarray:
    """Convex blend ``alpha * img + (1 - alpha) * haze_value`` with a constant (white) image."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"haze alpha {alpha} outside [0, 1]")
    if alpha == 1.0:
        return img.copy()
    return alpha * img + (1.0 - alpha) * haze_value


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge samples
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise DimensionError(f"output extent ({height}, {width}) must be at least 1")
    h, w = img.shape[:2]
    if (height, width) == (h, w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, height)
    x0, x1, fx = _axis_weights(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows = img[y0] * (1.0 - fy) + img[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def resample_bilinear(img: np.ndarray, factor: float, direction: str = "down") -> np.ndarray:
    if factor < 1:
        raise ContractError(f"factor must be >= 1, got {factor}")
    h, w = img.shape[:2]
    if direction == "down":
        size = (int(round(h / factor)), int(round(w / factor)))
    elif direction == "up":
        size = (int(round(h * factor)), int(round(w * factor)))
    else:
        raise ContractError(f"direction must be 'up' or 'down', got {direction!r}")
    return resize_bilinear(img, *size)


def add_gaussian_noise(img: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise of std ``delta / 255`` and clamp to [0, 1]."""
    if delta < 0:
        raise ContractError("noise std must be non-negative")
    if delta == 0:
        return img.copy()
    noisy = img + rng.normal(0.0, delta / 255.0, size=img.shape)
    return np.clip(noisy, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def jpeg_roundtrip(img: np.ndarray, quality: float) -> np.ndarray:
    """Encode to baseline JPEG (4:4:4) at ``quality`` and decode again."""
    if not 0 <= quality <= 100:
        raise ContractError(f"JPEG quality {quality} outside [0, 100]")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=int(round(quality)), subsampling=0)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def shift_image(img: np.ndarray, s_h: int, s_w: int) -> np.ndarray:
    """Translate content down/right by (s_h, s_w), replicating the edge into vacated pixels."""
    h, w = img.shape[:2]
    if not (0 <= s_h < h and 0 <= s_w < w):
        raise ContractError(f"shift ({s_h}, {s_w}) outside image extent ({h}, {w})")
    rows = np.clip(np.arange(h) - s_h, 0, h - 1)
    cols = np.clip(np.arange(w) - s_w, 0, w - 1)
    return img[rows][:, cols]


@dataclass(frozen=True)
class EvenParams:
    alpha: float
    sigma: float
    scale: float
    noise: float
    quality: int
    noise_seed: int


@dataclass(frozen=True)
class DegradationParams:
    shift_h: int
    shift_w: int
    first: EvenParams
    second: EvenParams | None = None
    patch_top: int = 0
    patch_left: int = 0
    patch_size: int = 0

    @property
    def uneven(self) -> bool:
        return self.second is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        d = dict(d)
        d["first"] = EvenParams(**d["first"])
        d["second"] = EvenParams(**d["second"]) if d.get("second") else None
        return cls(**d)


def degrade_chain(img: np.ndarray, p: EvenParams, haze_value: float = 1.0) -> np.ndarray:
    """Blur -> haze -> bilinear down -> noise -> JPEG -> bilinear up, on an already shifted image."""
    h, w = img.shape[:2]
    x = gaussian_blur(img, p.sigma)
    x = apply_haze(x, p.alpha, haze_value)
    x = resample_bilinear(x, p.scale, "down")
    x = add_gaussian_noise(x, p.noise, np.random.default_rng(p.noise_seed))
    x = jpeg_roundtrip(x, p.quality)
    x = resize_bilinear(x, h, w)
    return np.clip(x, 0.0, 1.0)


def degrade_even(img_clean: np.ndarray, params: DegradationParams, haze_value: float = 1.0) -> np.ndarray:
    shifted = shift_image(img_clean, params.shift_h, params.shift_w)
    return degrade_chain(shifted, params.first, haze_value)


def patch_mask(shape: tuple[int, int], top: int, left: int, size: int) -> np.ndarray:
    h, w = shape
    if size < 1 or top < 0 or left < 0 or top + size > h or left + size > w:
        raise ContractError(f"mask patch ({top}, {left}, {size}) outside image ({h}, {w})")
    m = np.zeros((h, w, 1))
    m[top : top + size, left : left + size] = 1.0
    return m


def degrade_uneven(
    img_clean: np.ndarray,
    params: DegradationParams,
    haze_value: float = 1.0,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Blend two independent even degradations of the same shifted image through a patch mask."""
    if params.second is None:
        raise ContractError("uneven degradation needs a second parameter set")
    shifted = shift_image(img_clean, params.shift_h, params.shift_w)
    if mask is None:
        mask = patch_mask(shifted.shape[:2], params.patch_top, params.patch_left, params.patch_size)
    inside = degrade_chain(shifted, params.first, haze_value)
    outside = degrade_chain(shifted, params.second, haze_value)
    return mask * inside + (1.0 - mask) * outside


def degrade(img_clean: np.ndarray, params: DegradationParams, haze_value: float = 1.0) -> np.ndarray:
    if params.uneven:
        return degrade_uneven(img_clean, params, haze_value)
    return degrade_even(img_clean, params, haze_value)


def _sample_even(rng: np.random.Generator, cfg, haze: bool) -> EvenParams:
    return EvenParams(
        alpha=float(rng.uniform(*cfg.alpha)) if haze else 1.0,
        sigma=float(rng.uniform(*cfg.sigma)),
        scale=float(rng.uniform(*cfg.scale)),
        noise=float(rng.uniform(*cfg.noise)),
        quality=int(rng.integers(cfg.jpeg[0], cfg.jpeg[1] + 1)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_params(rng: np.random.Generator, cfg, size: int) -> DegradationParams:
    """Draw one parameter set for an image of side ``size``.

    Shift and patch side are sampled as integers from the configured fractions
    of ``size``; haze, uneven blending and shift are each applied with their
    configured probability.
    """
    do_shift = rng.random() < cfg.p_shift
    do_haze = rng.random() < cfg.p_haze
    do_uneven = rng.random() < cfg.p_uneven
    s_lo = int(math.ceil(cfg.shift_frac[0] * size))
    s_hi = min(int(math.floor(cfg.shift_frac[1] * size)), size - 1)
    if do_shift:
        s_h, s_w = (int(v) for v in rng.integers(s_lo, s_hi + 1, size=2))
    else:
        s_h = s_w = 0
    first = _sample_even(rng, cfg, do_haze)
    if not do_uneven:
        return DegradationParams(s_h, s_w, first)
    second = _sample_even(rng, cfg, do_haze)
    l_lo = max(1, int(math.ceil(cfg.patch_frac[0] * size)))
    l_hi = min(size, int(math.floor(cfg.patch_frac[1] * size)))
    side = int(rng.integers(l_lo, l_hi + 1))
    top, left = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    return DegradationParams(s_h, s_w, first, second, top, left, side)


def entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


MANIFEST_FIELDS = ("index", "source", "degraded", "clean", "seed", "params")


@dataclass
class SynthesisSummary:
    written: int
    failed: list[str]
    haze: int
    uneven: int
    shifted: int
    manifest: Path

    def text(self) -> str:
        return (
            f"pairs written: {self.written}, failed: {len(self.failed)}, "
            f"haze: {self.haze}, uneven: {self.uneven}, shift: {self.shifted}"
        )


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def synthesize_one(path: Path, index: int, cfg, seed: int) -> tuple[dict, np.ndarray, np.ndarray]:
    clean = load_image(path)
    h, w = clean.shape[:2]
    params = sample_params(entry_rng(seed, index), cfg, min(h, w))
    degraded = degrade(clean, params, cfg.haze_value)
    target = shift_image(clean, params.shift_h, params.shift_w)
    return params.to_dict(), degraded, target


def synthesize_dataset(clean_dir: str | Path, out_dir: str | Path, cfg, seed: int) -> SynthesisSummary:
    """Write ``degraded/``, ``clean/`` (shifted targets) and ``manifest.jsonl`` under ``out_dir``.

    Each entry draws from its own stream ``(seed, index)``, so the worker count
    never changes the output. Unreadable files are logged and skipped.
    """
    sources = list_images(clean_dir)
    out = Path(out_dir)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)

    def work(item):
        i, path = item
        try:
            return i, path, synthesize_one(path, i, cfg, seed), None
        except Exception as exc:  # per-file failures are reported, not fatal
            return i, path, None, exc

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(work, enumerate(sources)))

    failed, lines = [], []
    tallies = {"haze": 0, "uneven": 0, "shift": 0}
    for i, path, result, exc in results:
        if exc is not None:
            log.warning("skipping %s: %s", path, exc)
            failed.append(str(path))
            continue
        params, degraded, target = result
        name = path.stem + ".png"
        save_image(degraded, out / "degraded" / name)
        save_image(target, out / "clean" / name)
        entry = {
            "index": i,
            "source": str(path),
            "degraded": f"degraded/{name}",
            "clean": f"clean/{name}",
            "seed": seed,
            "params": params,
        }
        lines.append(json.dumps(entry))
        tallies["haze"] += params["first"]["alpha"] < 1.0
        tallies["uneven"] += params["second"] is not None
        tallies["shift"] += (params["shift_h"], params["shift_w"]) != (0, 0)
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return SynthesisSummary(len(lines), failed, tallies["haze"], tallies["uneven"], tallies["shift"], manifest)


def replay_entry(entry: dict, haze_value: float = 1.0) -> np.ndarray:
    """Recompute the degraded image of a manifest entry from its source file."""
    params = DegradationParams.from_dict(entry["params"])
    return degrade(load_image(entry["source"]), params, haze_value)
