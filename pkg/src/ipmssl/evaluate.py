"""Misclassification rate and the metrics.csv row format."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def misclassification_rate(probs, labels) -> float:
    """Fraction of rows whose argmax differs from the label; ties go to the lowest index."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a nonempty (N, K) probability array")
    if len(labels) != len(probs):
        raise ValueError("probs and labels differ in length")
    return float(np.mean(np.argmax(probs, axis=1) != labels))


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    critic_loss: float
    gen_loss: float | None = None
    omega_f_hat: float | None = None
    omega_s_hat: float | None = None
    omega_gp_hat: float | None = None
    lambda_f: float | None = None
    lambda_s: float | None = None
    ce_loss: float | None = None
    train_lab_error: float | None = None
    val_error: float | None = None
    test_error: float | None = None


METRICS_FIELDS = tuple(f.name for f in dataclasses.fields(MetricsRecord))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: str | Path, records) -> None:
    """Header row plus one row per record; absent values are empty cells."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for r in records:
            w.writerow([_cell(getattr(r, name)) for name in METRICS_FIELDS])


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for name in METRICS_FIELDS:
                raw = row[name]
                if raw == "":
                    vals[name] = None
                elif name in ("step", "epoch"):
                    vals[name] = int(raw)
                else:
                    vals[name] = float(raw)
            out.append(MetricsRecord(**vals))
    return out
