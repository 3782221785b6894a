"""Tracking metrics: overlap series, success/precision curves, AO and SR.

Success and SR use strict inequality (IoU > threshold); precision uses
center error <= threshold. Benchmarks differ on the boundary, so the
convention is pinned here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox, iou

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 51)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)


@dataclass
class EvalReport:
    name: str
    ious: np.ndarray
    center_errors: np.ndarray
    success_curve: np.ndarray      # fraction of frames with IoU > t
    success_auc: float
    precision_curve: np.ndarray    # fraction of frames with error <= t px
    precision_at_20: float
    ao: float
    sr50: float
    sr75: float

    def lines(self) -> list[str]:
        return [
            f"name={self.name}",
            f"frames={len(self.ious)}",
            f"ao={self.ao!r}",
            f"sr50={self.sr50!r}",
            f"sr75={self.sr75!r}",
            f"success_auc={self.success_auc!r}",
            f"precision_at_20={self.precision_at_20!r}",
        ]


def overlap_series(pred: list[BBox], gt: list[BBox]) -> np.ndarray:
    """Frame-wise IoU; the first (init) frame is excluded from scoring."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} results vs {len(gt)} gt")
    return np.array([iou(p, g) for p, g in zip(pred[1:], gt[1:])])


def center_error_series(pred: list[BBox], gt: list[BBox]) -> np.ndarray:
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} results vs {len(gt)} gt")
    return np.array([np.hypot(p.cx - g.cx, p.cy - g.cy)
                     for p, g in zip(pred[1:], gt[1:])])


def success_auc(ious) -> tuple[np.ndarray, float]:
    """Success curve over 51 IoU thresholds and its mean (the AUC)."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("empty IoU list")
    curve = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve.mean())


def precision_curve(errors) -> tuple[np.ndarray, float]:
    """Center-error curve over 0..50 px; reports the 20 px point."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty error list")
    curve = (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return curve, float(curve[20])


def ao_sr(ious) -> tuple[float, float, float]:
    """(mean IoU, fraction IoU > 0.5, fraction IoU > 0.75)."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("empty IoU list")
    return (float(ious.mean()), float((ious > 0.5).mean()),
            float((ious > 0.75).mean()))


def evaluate_sequence(name: str, pred: list[BBox], gt: list[BBox]) -> EvalReport:
    ious = overlap_series(pred, gt)
    errors = center_error_series(pred, gt)
    return _report(name, ious, errors)


def _report(name: str, ious: np.ndarray, errors: np.ndarray) -> EvalReport:
    s_curve, auc = success_auc(ious)
    p_curve, p20 = precision_curve(errors)
    ao, sr50, sr75 = ao_sr(ious)
    return EvalReport(name, ious, errors, s_curve, auc, p_curve, p20,
                      ao, sr50, sr75)


def aggregate(reports: list[EvalReport]) -> EvalReport:
    """Frame-weighted pool over sequences, merged in name order."""
    if not reports:
        raise ValueError("nothing to aggregate")
    ordered = sorted(reports, key=lambda r: r.name)
    ious = np.concatenate([r.ious for r in ordered])
    errors = np.concatenate([r.center_errors for r in ordered])
    return _report("aggregate", ious, errors)


def write_report(report: EvalReport, out_dir):
    """Machine-readable summary plus curve tables as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{report.name}.txt", "w") as fh:
        fh.write("\n".join(report.lines()) + "\n")
    with open(out / f"{report.name}_success.csv", "w") as fh:
        fh.write("threshold,fraction\n")
        for t, v in zip(SUCCESS_THRESHOLDS, report.success_curve):
            fh.write(f"{t:.2f},{v!r}\n")
    with open(out / f"{report.name}_precision.csv", "w") as fh:
        fh.write("threshold_px,fraction\n")
        for t, v in zip(PRECISION_THRESHOLDS, report.precision_curve):
            fh.write(f"{t:.0f},{v!r}\n")
