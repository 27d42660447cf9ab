"""End-to-end toy run through the CLI: faces -> pairs -> dictionary -> restorer -> restore -> metrics."""

import argparse
import sys
from pathlib import Path

from facerestore import edm
from facerestore.cli import main as cli
from facerestore.toydata import toy_faces

ROOT = Path(__file__).resolve().parents[1]


def run(*args: str) -> None:
    print("$ facerestore", " ".join(args), flush=True)
    code = cli(list(args))
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", type=Path, default=Path("toy_run"))
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.yaml"))
    ap.add_argument("--n-images", type=int, default=32)
    ap.add_argument("--rohqd-steps", default="200")
    ap.add_argument("--restorer-steps", default="300")
    args = ap.parse_args()

    w = args.work
    for split, seed, n in (("train", 0, args.n_images), ("test", 1, max(4, args.n_images // 4))):
        d = w / "faces" / split
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(toy_faces(n, 64, seed=seed)):
            edm.save_image(img, d / f"{split}_{i:03d}.png")

    cfg = ["--config", args.config]
    run("degrade", "--input-dir", str(w / "faces/train"), "--output-dir", str(w / "pairs/train"), *cfg)
    run("degrade", "--input-dir", str(w / "faces/test"), "--output-dir", str(w / "pairs/test"), *cfg, "--seed", "1")
    run("train-rohqd", "--data-dir", str(w / "faces/train"), "--output", str(w / "rohqd.ckpt"), "--steps", args.rohqd_steps, *cfg)
    run(
        "train-restorer", "--pairs-dir", str(w / "pairs/train"), "--rohqd", str(w / "rohqd.ckpt"),
        "--output", str(w / "restorer.ckpt"), "--steps", args.restorer_steps, *cfg,
    )
    run(
        "restore", "--checkpoint", str(w / "restorer.ckpt"), "--input", str(w / "pairs/test/degraded"),
        "--output", str(w / "restored"), "--dump-attention", str(w / "attention"),
    )
    run("metrics", "--restored", str(w / "restored"), "--reference", str(w / "pairs/test/clean"))
    run("metrics", "--restored", str(w / "pairs/test/degraded"), "--reference", str(w / "pairs/test/clean"))


if __name__ == "__main__":
    main()
