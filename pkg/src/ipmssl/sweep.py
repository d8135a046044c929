"""Grid sweeps over config axes with seed aggregation.

A sweep spec is a JSON object::

    {"base": {...config...},
     "axes": {"placements": [...], "formulation": [...], "seed": [0, 1, 2]}}

Cells are the Cartesian product of the non-seed axes, enumerated in the
order the axes are declared (first axis varies slowest).  Every cell runs
once per seed; the summary reports mean and population std of the
best-validation test error.  When placements vary but ipm does not, each
cell's ipm is inferred from its placements.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import (ConfigError, NormSpec, Placement, apply_overrides, infer_ipm, parse_config,
                     validate_config)

log = logging.getLogger(__name__)

SWEEP_AXES = ("ipm", "formulation", "placements", "norm", "n_labeled", "seed")


@dataclass(frozen=True)
class SweepSpec:
    base: dict
    axes: dict[str, list]

    @classmethod
    def parse(cls, obj: dict) -> "SweepSpec":
        unknown = set(obj) - {"base", "axes"}
        if unknown:
            raise ConfigError(f"unknown key(s) in sweep spec: {sorted(unknown)}")
        axes = dict(obj.get("axes", {}))
        for name, values in axes.items():
            if name not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {name!r} needs a nonempty list of values")
        return cls(dict(obj.get("base", {})), axes)

    @classmethod
    def load(cls, path: str | Path) -> "SweepSpec":
        with open(path) as fh:
            return cls.parse(json.load(fh))

    @property
    def cell_axes(self) -> list[str]:
        return [a for a in self.axes if a != "seed"]

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.axes.get("seed", [self.base.get("seed", 0)])]

    def cells(self) -> list[dict]:
        """Raw config dicts (without seed) in declaration order."""
        names = self.cell_axes
        out = []
        for combo in itertools.product(*(self.axes[n] for n in names)):
            raw = json.loads(json.dumps(self.base))
            raw.update(zip(names, combo))
            if "placements" in names and "ipm" not in names:
                try:
                    raw["ipm"] = infer_ipm(raw["placements"]).value
                except (ConfigError, ValueError, TypeError):
                    pass  # left for validation to reject
            out.append(raw)
        return out


def axis_label(name: str, value) -> str:
    if name == "placements":
        return "+".join(str(Placement.parse(p)) for p in value) or "none"
    if name == "norm":
        return str(NormSpec.parse(value))
    return "none" if value is None else str(value)


@dataclass
class CellResult:
    axes: dict[str, str]
    status: str  # ok | rejected | failed
    test_errors: list[float] = field(default_factory=list)
    reason: str = ""

    @property
    def mean(self) -> float | None:
        return sum(self.test_errors) / len(self.test_errors) if self.test_errors else None

    @property
    def std(self) -> float | None:
        if not self.test_errors:
            return None
        m = self.mean
        return math.sqrt(sum((e - m) ** 2 for e in self.test_errors) / len(self.test_errors))


def _run_job(job: tuple[dict, str]) -> tuple[int, str, float | None]:
    import torch

    from .cli import run_config
    torch.set_num_threads(1)
    raw, out_dir = job
    cfg = parse_config(raw)
    code, summary = run_config(cfg, Path(out_dir), quiet=True)
    return code, summary.get("error", ""), summary.get("test_error")


def run_sweep(spec: SweepSpec, out_dir: str | Path, jobs: int = 1, overrides=None) -> list[CellResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[CellResult] = []
    pending: list[tuple[int, tuple[dict, str]]] = []
    for i, raw in enumerate(spec.cells()):
        raw = apply_overrides(raw, overrides)
        labels = {n: axis_label(n, raw.get(n)) for n in spec.cell_axes}
        try:
            cfg = parse_config(raw)
            report = validate_config(cfg)
            reason = "; ".join(report.errors)
        except ConfigError as exc:
            reason = str(exc)
        if reason:
            results.append(CellResult(labels, "rejected", reason=reason))
            continue
        results.append(CellResult(labels, "ok"))
        for seed in spec.seeds:
            pending.append((i, ({**raw, "seed": seed}, str(out_dir / f"cell{i:03d}" / f"seed{seed}"))))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_job, [job for _, job in pending]))
    else:
        outcomes = [_run_job(job) for _, job in pending]

    for (i, _), (code, error, test_error) in zip(pending, outcomes):
        cell = results[i]
        if code != 0 or test_error is None:
            cell.status = "failed"
            cell.reason = "; ".join(filter(None, [cell.reason, error or f"exit code {code}"]))
        elif cell.status == "ok":
            cell.test_errors.append(test_error)
    for cell in results:
        if cell.status == "failed":
            cell.test_errors = []
    write_summary(out_dir / "summary.csv", spec.cell_axes, results)
    return results


def write_summary(path: Path, axes: list[str], results: list[CellResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*axes, "status", "mean", "std", "n_seeds", "reason"])
        for r in results:
            fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
            w.writerow([*(r.axes[a] for a in axes), r.status, fmt(r.mean), fmt(r.std),
                        len(r.test_errors), r.reason])
