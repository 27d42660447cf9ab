"""Configuration dataclasses, presets and YAML loading with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import DEFAULT_REGIONS, LossWeights


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    widths: tuple[int, ...] = (16, 16, 16, 32)
    blocks_per_level: tuple[int, ...] = (1, 1, 1, 1)
    scales: int = 2
    mhca_per_scale: int = 3
    num_heads: int = 4
    codebook_size: int = 32
    codebook_dim: int = 32
    disc_width: int = 16
    disc_layers: int = 4
    comp_disc_layers: int = 3
    crop_size: int = 32
    # U-Net style encoder->decoder skips at unfused levels; not part of the
    # published wiring, kept only for experimentation.
    decoder_skips: bool = False

    @property
    def n_down(self) -> int:
        return len(self.widths) - 1

    @property
    def latent_size(self) -> int:
        return self.image_size // 2**self.n_down

    def validate(self) -> None:
        if len(self.widths) < 1 or len(self.widths) != len(self.blocks_per_level):
            raise ConfigError("arch.widths and arch.blocks_per_level need equal, non-zero length")
        if any(w < 1 for w in self.widths) or any(b < 0 for b in self.blocks_per_level):
            raise ConfigError("arch.widths must be positive and blocks_per_level non-negative")
        if self.image_size < 1 or self.image_size % 2**self.n_down:
            raise ConfigError(f"arch.image_size {self.image_size} not divisible by 2**{self.n_down}")
        if not 1 <= self.scales <= self.n_down + 1:
            raise ConfigError(f"arch.scales must be in [1, {self.n_down + 1}]")
        if self.mhca_per_scale < 1:
            raise ConfigError("arch.mhca_per_scale must be >= 1")
        if self.num_heads < 1:
            raise ConfigError("arch.num_heads must be >= 1")
        if self.codebook_dim % self.num_heads:
            raise ConfigError("arch.codebook_dim must be divisible by arch.num_heads")
        for s in range(1, self.scales):
            if self.widths[self.n_down - s] % self.num_heads:
                raise ConfigError(f"width at fused scale {s} not divisible by arch.num_heads")
        if self.codebook_size < 1 or self.codebook_dim < 1:
            raise ConfigError("arch.codebook_size and arch.codebook_dim must be >= 1")
        if self.disc_layers < 1 or self.image_size < 2**self.disc_layers:
            raise ConfigError("arch.disc_layers too deep for the image size")
        if self.comp_disc_layers < 1 or self.crop_size < 2**self.comp_disc_layers:
            raise ConfigError("arch.comp_disc_layers too deep for the crop size")


@dataclass(frozen=True)
class EDMConfig:
    # shift and patch side are fractions of the image extent (512 px reference)
    shift_frac: tuple[float, float] = (0.0, 1.0 / 16)
    alpha: tuple[float, float] = (0.7, 1.0)
    sigma: tuple[float, float] = (0.2, 10.0)
    scale: tuple[float, float] = (1.0, 8.0)
    noise: tuple[float, float] = (0.0, 20.0)
    jpeg: tuple[int, int] = (60, 100)
    patch_frac: tuple[float, float] = (0.25, 0.5)
    p_haze: float = 0.3
    p_uneven: float = 0.3
    p_shift: float = 0.5
    haze_value: float = 1.0
    workers: int = 1

    def validate(self) -> None:
        for name in ("shift_frac", "alpha", "sigma", "scale", "noise", "jpeg", "patch_frac"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"edm.{name}: lower bound above upper bound")
        if not (0.0 <= self.alpha[0] and self.alpha[1] <= 1.0):
            raise ConfigError("edm.alpha must lie in [0, 1]")
        if self.sigma[0] < 0 or self.noise[0] < 0:
            raise ConfigError("edm.sigma and edm.noise must be non-negative")
        if self.scale[0] < 1:
            raise ConfigError("edm.scale must be >= 1")
        if not (0 <= self.jpeg[0] and self.jpeg[1] <= 100):
            raise ConfigError("edm.jpeg must lie in [0, 100]")
        if self.shift_frac[0] < 0 or self.shift_frac[1] >= 1:
            raise ConfigError("edm.shift_frac must lie in [0, 1)")
        if self.patch_frac[0] <= 0 or self.patch_frac[1] > 1:
            raise ConfigError("edm.patch_frac must lie in (0, 1]")
        for name in ("p_haze", "p_uneven", "p_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"edm.{name} must be a probability")
        if not 0.0 <= self.haze_value <= 1.0:
            raise ConfigError("edm.haze_value must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("edm.workers must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    steps: int = 300
    sample_every: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.sample_every < 0:
            raise ConfigError("train.batch_size must be >= 1; steps and sample_every >= 0")


def _default_regions() -> dict[str, tuple[float, float, float, float]]:
    return {r.name: r.box for r in DEFAULT_REGIONS}


@dataclass(frozen=True)
class Config:
    arch: ArchConfig = field(default_factory=ArchConfig)
    edm: EDMConfig = field(default_factory=EDMConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    regions: dict = field(default_factory=_default_regions)
    seed: int = 0
    surrogate_seed: int = 1234

    def validate(self) -> "Config":
        self.arch.validate()
        self.edm.validate()
        self.train.validate()
        from .losses import ComponentRegion

        for name, box in self.regions.items():
            if len(box) != 4:
                raise ConfigError(f"region {name} needs four coordinates")
            try:
                ComponentRegion(name, tuple(box))
            except Exception as exc:
                raise ConfigError(str(exc)) from exc
        return self

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where} must be a list")
            kwargs[name] = tuple(value)
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            kwargs[name] = {k: tuple(v) for k, v in value.items()}
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be true or false")
            kwargs[name] = value
        elif isinstance(current, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")
            if isinstance(current, int) and not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer")
            kwargs[name] = value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict, base: Config | None = None) -> Config:
    """Build a validated config; keys in ``data`` override ``base`` (default: toy preset)."""
    merged = _merge((base or toy_config()).to_dict(), data or {})
    return _build(Config, merged, "").validate()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "regions":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return toy_config()
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    preset = data.pop("preset", "toy") if isinstance(data, dict) else "toy"
    presets = {"toy": toy_config, "full": full_config}
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r}")
    return config_from_dict(data, presets[preset]())


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def toy_config() -> Config:
    """Desk-scale preset: 64x64 input, three downsamplings, 8x8 latent."""
    return Config().validate()


def full_config() -> Config:
    """Published-scale preset (512x512, 16x16x256 latent, 1024 elements). Not runnable at desk scale."""
    arch = ArchConfig(
        image_size=512,
        widths=(32, 64, 128, 128, 256, 256),
        blocks_per_level=(2, 2, 2, 2, 2, 2),
        scales=2,
        mhca_per_scale=3,
        num_heads=4,
        codebook_size=1024,
        codebook_dim=256,
        disc_width=64,
        disc_layers=4,
        comp_disc_layers=3,
        crop_size=80,
    )
    return Config(arch=arch, train=TrainConfig(batch_size=16)).validate()
