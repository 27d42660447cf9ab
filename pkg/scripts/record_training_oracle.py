"""Run both desk-scale training trends once and freeze the results into the test fixture."""

import argparse
import json
import platform
from pathlib import Path

import torch

from facerestore.trend import as_dict, run_restorer_trend, run_rohqd_trend

ROOT = Path(__file__).resolve().parents[1]

ROHQD_ARGS = {"seed": 0, "steps": 200, "n_images": 64}
RESTORER_ARGS = {"seed": 0, "steps": 300, "n_train": 64, "n_test": 16, "rohqd_steps": 200, "lr": 1e-4, "rohqd_lr": 1e-3}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output", type=Path, default=ROOT / "tests" / "fixtures" / "training_oracle.json")
    args = ap.parse_args()

    rohqd, _ = run_rohqd_trend(**ROHQD_ARGS)
    print(f"rohqd: L1 {rohqd.l1_step10:.4f} -> {rohqd.l1_final:.4f} ratio {rohqd.ratio:.3f} ({rohqd.seconds:.0f}s)")
    rest = run_restorer_trend(**RESTORER_ARGS)
    print(
        f"restorer: loss ratio {rest.ratio:.3f}, held-out PSNR {rest.psnr_restored:.2f} dB "
        f"vs degraded {rest.psnr_degraded:.2f} dB ({rest.seconds:.0f}s)"
    )
    record = {
        "environment": {"python": platform.python_version(), "torch": torch.__version__, "threads": torch.get_num_threads()},
        "rohqd": {"args": ROHQD_ARGS, "max_ratio": 0.5, "recorded": as_dict(rohqd)},
        "restorer": {"args": RESTORER_ARGS, "max_ratio": 0.7, "min_psnr_gain_db": 0.0, "recorded": as_dict(rest)},
    }
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_text(json.dumps(record, indent=2) + "\n")
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
