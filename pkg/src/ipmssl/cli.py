"""Command line entry point: ``ipmssl run | sweep | baseline``.

Exit codes: 0 success, 2 invalid config (report printed), 3 non-finite
values during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import (ConfigError, ExperimentConfig, apply_overrides, parse_config, save_config,
                     validate_config)
from .evaluate import write_metrics_csv
from .nn import NonFiniteError, save_checkpoint
from .training import TrainResult, supervised_baseline, train

EXIT_OK, EXIT_INVALID, EXIT_NONFINITE = 0, 2, 3

log = logging.getLogger("ipmssl")


def _load_raw(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def run_config(cfg: ExperimentConfig, out_dir: Path, quiet: bool = False) -> tuple[int, dict]:
    """Validate, train (or run the supervised baseline), and write outputs.

    Writes config.json, metrics.csv, final_report.json and critic/generator
    checkpoints into ``out_dir``.  Returns (exit code, report dict).
    """
    report = validate_config(cfg)
    for w in report.warnings:
        log.warning("%s", w)
    if not report.ok:
        print(f"invalid config:\n{report}", file=sys.stderr)
        return EXIT_INVALID, {"error": "; ".join(report.errors)}

    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")
    rows = []
    try:
        if cfg.mode == "supervised":
            result = supervised_baseline(cfg)
            rows = result.metrics
        else:
            result = train(cfg, on_row=rows.append)
    except NonFiniteError as exc:
        write_metrics_csv(out_dir / "metrics.csv", rows)
        summary = {"status": "nonfinite", "error": str(exc), "generator_steps": len(rows)}
        (out_dir / "final_report.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE, summary

    write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    summary = {"status": "ok", "mode": cfg.mode, "seed": cfg.seed, **result.summary(),
               "warnings": report.warnings}
    (out_dir / "final_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_checkpoints(result, out_dir, cfg)
    if not quiet:
        print(json.dumps({k: summary[k] for k in ("best_epoch", "best_val_error", "test_error")}))
    return EXIT_OK, summary


def _write_checkpoints(result: TrainResult, out_dir: Path, cfg: ExperimentConfig) -> None:
    meta = {"config": cfg.to_dict(), "best_epoch": result.best_epoch}
    st = result.state
    save_checkpoint(out_dir / "critic_final.json", st.critic.state_dict(), {**meta, "which": "final"})
    save_checkpoint(out_dir / "generator_final.json", st.generator.state_dict(), {**meta, "which": "final"})
    if result.best_critic is not None:
        save_checkpoint(out_dir / "critic_best.json", result.best_critic, {**meta, "which": "best"})
    if result.best_generator is not None:
        save_checkpoint(out_dir / "generator_best.json", result.best_generator, {**meta, "which": "best"})


def _config_from_args(path: str, overrides, seed: int | None = None, supervised: bool = False):
    raw = apply_overrides(_load_raw(path), overrides)
    if seed is not None:
        raw["seed"] = seed
    if supervised:
        raw["mode"] = "supervised"
    return parse_config(raw)


def cmd_run(args, supervised: bool = False) -> int:
    try:
        cfg = _config_from_args(args.config, getattr(args, "override", None), getattr(args, "seed", None),
                                supervised)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    code, _ = run_config(cfg, Path(args.out))
    return code


def cmd_sweep(args) -> int:
    from .sweep import SweepSpec, run_sweep
    try:
        spec = SweepSpec.load(args.spec)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid sweep spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    results = run_sweep(spec, args.out, jobs=args.jobs, overrides=args.override)
    for r in results:
        mean = "" if r.mean is None else f"{r.mean:.4f} ± {r.std:.4f} (n={len(r.test_errors)})"
        print(" ".join(f"{k}={v}" for k, v in r.axes.items()), r.status, mean, r.reason)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipmssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    sweep = sub.add_parser("sweep", help="run a grid of configurations over seeds")
    sweep.add_argument("--spec", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="applied to every cell")

    base = sub.add_parser("baseline", help="supervised-only run of a configuration's critic")
    base.add_argument("--config", required=True)
    base.add_argument("--out", required=True)
    base.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "baseline":
        return cmd_run(args, supervised=True)
    return cmd_sweep(args)


if __name__ == "__main__":
    sys.exit(main())
