"""Run the paired benchmark experiments behind the headline comparisons and print a table.

Usage: python scripts/takeaways.py --out runs/takeaways [--seeds 5] [--jobs 1] [--epochs 120]
"""
import argparse
import json
from pathlib import Path

import torch

from ipmssl.sweep import SweepSpec, run_sweep

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

EXPERIMENTS = {
    "formulation": {"formulation": ["k_plus_one", "plain"]},
    "supervised": {"mode": ["supervised"]},
    "gp placement": {"ipm": ["wgan_gp"], "placements": [[["gp", "f"]], [["gp", "f_minus"]]]},
    "fisher placement": {"placements": [[["fisher", "f"]], [["fisher", "f_minus"]]]},
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    base = json.loads((CONFIGS / "synthetic_fisher_kp1.json").read_text())
    overrides = [f"hyper.epochs={args.epochs}"] if args.epochs is not None else None
    print(f"{'experiment':<18} {'cell':<40} {'status':<9} {'mean':>8} {'std':>8}")
    for name, axes in EXPERIMENTS.items():
        raw_base = dict(base)
        for key in ("mode", "ipm", "placements", "formulation"):
            if key in axes:
                raw_base.pop(key, None)
        if "mode" in axes:
            raw_base["mode"] = axes["mode"][0]
            axes = {}
        spec = SweepSpec.parse({"base": raw_base, "axes": {**axes, "seed": list(range(args.seeds))}})
        for cell in run_sweep(spec, Path(args.out) / name.replace(" ", "_"), jobs=args.jobs, overrides=overrides):
            label = ", ".join(f"{k}={v}" for k, v in cell.axes.items()) or "-"
            mean = f"{cell.mean:.4f}" if cell.test_errors else "-"
            std = f"{cell.std:.4f}" if cell.test_errors else "-"
            print(f"{name:<18} {label:<40} {cell.status:<9} {mean:>8} {std:>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
