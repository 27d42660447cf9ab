"""Command-line entry point: ``facerestore <command> ...``.

Exit codes: 0 success, 1 bad or missing input data, 2 invalid configuration
or checkpoint, 3 non-finite loss during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import edm
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, tensors_from_module
from .config import Config, config_from_dict, load_config
from .errors import ConfigError, ContractError, NonFiniteLossError
from .losses import ComponentRegion, SurrogateFeatureNet
from .metrics import evaluate_pairs
from .restorer import RestorerModel, restore, train_restorer
from .rohqd import VQAutoencoder, train_rohqd

log = logging.getLogger("facerestore")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> Config:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        raise CliError(f"invalid config: {exc}", 2) from exc
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _image_dir(path: str | Path) -> list[Path]:
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"{d} is not a readable directory", 1)
    files = edm.list_images(d)
    if not files:
        raise CliError(f"no PNG/JPEG images in {d}", 1)
    return files


def _load_stack(files: list[Path], size: int) -> np.ndarray:
    images = []
    for f in files:
        try:
            img = edm.load_image(f)
        except OSError as exc:
            raise CliError(f"cannot read {f}: {exc}", 1) from exc
        if img.shape[:2] != (size, size):
            raise CliError(f"{f} is {img.shape[1]}x{img.shape[0]}, config expects {size}x{size}", 2)
        images.append(img)
    return np.stack(images)


def save_grid(rows: list[np.ndarray], path: Path) -> None:
    """Save a grid: each entry of ``rows`` is a batch (N, H, W, 3) laid out left to right."""
    grid = np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0)
    edm.save_image(grid, path)


def _save_model(kind: str, module: torch.nn.Module, cfg: Config, path: Path, step: int, trainable: bool) -> None:
    ckpt = Checkpoint(kind, cfg.to_dict(), tensors_from_module(module), step=step, codebook_trainable=trainable)
    save_checkpoint(ckpt, path)


def _load(path: str | Path, kind: str) -> tuple[Checkpoint, Config]:
    try:
        ckpt = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", 2) from exc
    if ckpt.kind != kind:
        raise CliError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}", 2)
    try:
        cfg = config_from_dict(ckpt.config)
    except ConfigError as exc:
        raise CliError(f"checkpoint {path} carries an invalid config: {exc}", 2) from exc
    return ckpt, cfg


# ---- commands ----


def cmd_degrade(args) -> int:
    cfg = _config(args)
    _image_dir(args.input_dir)
    summary = edm.synthesize_dataset(args.input_dir, args.output_dir, cfg.edm, cfg.seed)
    print(summary.text())
    for f in summary.failed:
        print(f"failed: {f}", file=sys.stderr)
    if summary.written == 0:
        raise CliError("no input image could be processed", 1)
    return 0


def _log_path(args, output: Path) -> Path:
    return Path(args.log) if args.log else output.with_suffix(".log.jsonl")


def cmd_train_rohqd(args) -> int:
    cfg = _config(args)
    images = _load_stack(_image_dir(args.data_dir), cfg.arch.image_size)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    preview = images[: min(4, len(images))]
    sample_dir = Path(args.sample_dir) if args.sample_dir else out.parent / "samples"

    def snapshot(step, model):
        # periodic snapshots keep the dictionary marked trainable: training is not finished
        _save_model("rohqd", model, cfg, out.with_name(f"{out.stem}_step{step}{out.suffix}"), step, True)
        sample_dir.mkdir(parents=True, exist_ok=True)
        with torch.no_grad():
            rec, _, _ = model(torch.from_numpy(preview.transpose(0, 3, 1, 2).copy()))
        save_grid([preview, rec.clamp(0, 1).permute(0, 2, 3, 1).numpy()], sample_dir / f"rohqd_step{step}.png")

    res = train_rohqd(
        images,
        cfg,
        steps=args.steps,
        log_path=_log_path(args, out),
        snapshot=snapshot,
        snapshot_every=cfg.train.sample_every,
    )
    _save_model("rohqd", res.model, cfg, out, res.step, trainable=False)
    print(f"trained {res.step} steps; final l1 {res.log[-1]['l1']:.5f}" if res.log else "trained 0 steps")
    print(f"checkpoint: {out}")
    return 0


def _read_pairs(pairs_dir: Path, size: int) -> tuple[np.ndarray, np.ndarray]:
    manifest = pairs_dir / "manifest.jsonl"
    if manifest.is_file():
        entries = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
        deg = [pairs_dir / e["degraded"] for e in entries]
        clean = [pairs_dir / e["clean"] for e in entries]
    else:
        deg = _image_dir(pairs_dir / "degraded")
        clean = [pairs_dir / "clean" / p.name for p in deg]
    if not deg:
        raise CliError(f"no pairs found in {pairs_dir}", 1)
    return _load_stack(deg, size), _load_stack(clean, size)


def cmd_train_restorer(args) -> int:
    if not args.rohqd:
        raise CliError("--rohqd checkpoint is required", 2)
    cfg = _config(args)
    vq_ckpt, vq_cfg = _load(args.rohqd, "rohqd")
    if vq_ckpt.codebook_trainable:
        raise CliError(f"{args.rohqd} is marked trainable; the dictionary must be finished and frozen", 2)
    if vq_cfg.arch != cfg.arch:
        raise CliError("architecture of the ROHQD checkpoint differs from the restorer config", 2)
    vq = VQAutoencoder(cfg.arch)
    vq.load_state_dict(vq_ckpt.state_dict())
    model = RestorerModel.from_rohqd(cfg.arch, vq, seed=cfg.seed)
    deg, clean = _read_pairs(Path(args.pairs_dir), cfg.arch.image_size)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    sample_dir = Path(args.sample_dir) if args.sample_dir else out.parent / "samples"
    n = min(4, len(deg))

    def snapshot(step, m):
        sample_dir.mkdir(parents=True, exist_ok=True)
        restored, _ = restore(deg[:n], m)
        save_grid([deg[:n], restored, clean[:n]], sample_dir / f"restorer_step{step}.png")

    try:
        res = train_restorer(deg, clean, model, cfg, steps=args.steps, log_path=_log_path(args, out), snapshot=snapshot)
    except NonFiniteLossError as exc:
        raise CliError(str(exc), 3) from exc
    _save_model("restorer", model, cfg, out, res.step, trainable=False)
    print(f"trained {res.step} steps; final total {res.log[-1]['total']:.5f}" if res.log else "trained 0 steps")
    print(f"checkpoint: {out}")
    return 0


def attention_heatmaps(trace, image_size: int, region: ComponentRegion) -> list[tuple[int, int, np.ndarray]]:
    """Per scale and head: mean attention of the queries inside ``region``, as an image-sized map.

    Uses the last fusion block of every scale; maps are rescaled to [0, 1].
    """
    out = []
    x0, y0, x1, y1 = region.box
    for s, weights in enumerate(trace.attention):
        h = w = trace.degraded[s].shape[2]
        rows = range(int(y0 * h), max(int(y0 * h) + 1, int(np.ceil(y1 * h))))
        cols = range(int(x0 * w), max(int(x0 * w) + 1, int(np.ceil(x1 * w))))
        queries = [r * w + c for r in rows for c in cols]
        for head in range(weights.shape[1]):
            m = weights[0, head, queries].mean(0).reshape(h, w).numpy()
            m = (m - m.min()) / (m.max() - m.min()) if m.max() > m.min() else np.zeros_like(m)
            f = image_size // h
            out.append((s, head, np.repeat(np.repeat(m, f, 0), f, 1)))
    return out


def cmd_restore(args) -> int:
    ckpt, cfg = _load(args.checkpoint, "restorer")
    model = RestorerModel(cfg.arch)
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"{src} does not exist", 1)
    files = _image_dir(src) if src.is_dir() else [src]
    dst = Path(args.output)
    many = src.is_dir()
    (dst if many else dst.parent).mkdir(parents=True, exist_ok=True)
    dump = Path(args.dump_attention) if args.dump_attention else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    region = ComponentRegion("left_eye", tuple(cfg.regions["left_eye"]))
    size = cfg.arch.image_size
    for f in files:
        img = _load_stack([f], size)[0]
        restored, trace = restore(img, model, keep_attention=dump is not None)
        target = dst / (f.stem + ".png") if many else dst
        edm.save_image(restored, target)
        if dump is not None:
            for s, head, m in attention_heatmaps(trace, size, region):
                edm.save_image(np.repeat(m[..., None], 3, axis=2), dump / f"{f.stem}_attn_s{s}_h{head}.png")
    print(f"restored {len(files)} image(s)")
    return 0


def cmd_metrics(args) -> int:
    cfg = _config(args)
    a_files = {p.stem: p for p in _image_dir(args.restored)}
    b_files = {p.stem: p for p in _image_dir(args.reference)}
    orphans = sorted(set(a_files) ^ set(b_files))
    if orphans:
        for name in orphans:
            side = args.restored if name in a_files else args.reference
            print(f"unpaired: {name} (only in {side})", file=sys.stderr)
        raise CliError(f"{len(orphans)} unpaired file(s)", 1)
    id_net = SurrogateFeatureNet("identity", seed=cfg.surrogate_seed)
    pairs = []
    for name in sorted(a_files):
        a, b = edm.load_image(a_files[name]), edm.load_image(b_files[name])
        if a.shape != b.shape:
            raise CliError(f"{name}: extents differ ({a.shape} vs {b.shape})", 1)
        pairs.append((name, a, b))
    report = evaluate_pairs(pairs, id_net)
    text = report.text()
    print(text, end="")
    if args.output:
        Path(args.output).write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed or 0, echo=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facerestore", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML config (default: toy preset)")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")

    d = sub.add_parser("degrade", help="synthesize (degraded, clean) pairs from clean images")
    d.add_argument("--input-dir", required=True)
    d.add_argument("--output-dir", required=True)
    common(d)
    d.set_defaults(func=cmd_degrade)

    for name, func in (("train-rohqd", cmd_train_rohqd), ("train-restorer", cmd_train_restorer)):
        t = sub.add_parser(name, help=f"{name.split('-')[1]} training")
        if name == "train-rohqd":
            t.add_argument("--data-dir", required=True, help="directory of clean images")
        else:
            t.add_argument("--pairs-dir", required=True, help="output directory of `degrade`")
            t.add_argument("--rohqd", help="finished dictionary checkpoint")
        t.add_argument("--output", required=True, help="checkpoint path")
        t.add_argument("--steps", type=int, help="overrides train.steps")
        t.add_argument("--log", help="loss log path (default: <output>.log.jsonl)")
        t.add_argument("--sample-dir", help="sample grids (default: <output dir>/samples)")
        common(t)
        t.set_defaults(func=func)

    r = sub.add_parser("restore", help="restore images with a trained checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="image file or directory")
    r.add_argument("--output", required=True, help="image file or directory")
    r.add_argument("--dump-attention", metavar="DIR", help="write per-scale, per-head heatmaps for left-eye queries")
    r.set_defaults(func=cmd_restore)

    m = sub.add_parser("metrics", help="PSNR / SSIM / IDD over paired directories")
    m.add_argument("--restored", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--output", help="also write the table here")
    common(m, seed=False)
    m.set_defaults(func=cmd_metrics)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
