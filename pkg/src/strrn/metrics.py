"""Inter-pupil normalised RMSE, CED curves and AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .shape import ComponentPartition, as_shape


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CedCurve:
    thresholds: np.ndarray
    fractions: np.ndarray


@dataclass(frozen=True)
class ErrorSeries:
    values: np.ndarray
    mean: float
    sequence_id: str = ""


def inter_pupil_distance(gt, partition: ComponentPartition) -> float:
    p = as_shape(gt)
    right = p[list(partition.group(partition.eyes[0]))].mean(axis=0)
    left = p[list(partition.group(partition.eyes[1]))].mean(axis=0)
    return float(np.hypot(*(right - left)))


def normalized_rmse(pred, gt, partition: ComponentPartition) -> float:
    """Mean point-to-point error divided by the distance between eye-group centroids."""
    pred, gt = as_shape(pred), as_shape(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark count mismatch: {pred.shape} vs {gt.shape}")
    ipd = inter_pupil_distance(gt, partition)
    if ipd <= 0:
        raise DegenerateInputError("ground-truth inter-pupil distance is zero")
    return float(np.mean(np.hypot(*(pred - gt).T)) / ipd)


def ced_curve(errors: Sequence[float], thresholds: Sequence[float]) -> CedCurve:
    e = np.sort(np.asarray(errors, dtype=np.float64))
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be ascending")
    if e.size == 0:
        raise ValueError("no errors given")
    frac = np.searchsorted(e, th, side="right") / e.size
    return CedCurve(th, frac)


def auc(errors: Sequence[float], max_thresh: float) -> float:
    """Area under the empirical CED on [0, max_thresh], as a percentage of the box."""
    if max_thresh <= 0:
        raise ValueError("max_thresh must be positive")
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValueError("no errors given")
    # the CDF is a step function: constant k/N on [e_k, e_{k+1})
    knots = np.concatenate([[0.0], np.clip(e, 0.0, max_thresh), [max_thresh]])
    heights = np.arange(e.size + 1) / e.size
    area = float(np.sum(np.diff(knots) * heights))
    return 100.0 * area / max_thresh


def sequence_errors(preds: Sequence, gts: Sequence, partition: ComponentPartition,
                    sequence_id: str = "") -> ErrorSeries:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    vals = np.array([normalized_rmse(p, g, partition) for p, g in zip(preds, gts)])
    return ErrorSeries(vals, float(vals.mean()) if vals.size else 0.0, sequence_id)


CED_THRESHOLDS = np.round(np.linspace(0.0, 0.08, 81), 6)


def write_reports(out_dir: str | Path, series: Sequence[ErrorSeries],
                  thresholds: Sequence[float] = CED_THRESHOLDS) -> dict:
    """Write series.csv, ced.csv and summary.csv; return the summary row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_errors = np.concatenate([s.values for s in series]) if series else np.zeros(0)
    with open(out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", "err"])
        for s in series:
            for t, v in enumerate(s.values):
                w.writerow([s.sequence_id, t, repr(float(v))])
    curve = ced_curve(all_errors, thresholds)
    with open(out / "ced.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction"])
        for th, fr in zip(curve.thresholds, curve.fractions):
            w.writerow([repr(float(th)), repr(float(fr))])
    summary = {"mean_nrmse": float(all_errors.mean()),
               "auc05": auc(all_errors, 0.05), "auc08": auc(all_errors, 0.08)}
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(summary))
        w.writerow([repr(v) for v in summary.values()])
    return summary
