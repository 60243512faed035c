"""Depth-estimation and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .geometry import PoseSE3, pose_to_transform


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float  # delta < 1.25
    a2: float  # delta < 1.25^2
    a3: float  # delta < 1.25^3

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class AteResult:
    mean: float
    std: float
    n_snippets: int

    def to_record(self) -> dict:
        return asdict(self)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, cap: float = 80.0,
                  median_scaling: bool = True) -> Optional[DepthMetrics]:
    """Standard depth error/accuracy metrics.

    Pixels where either map is non-positive are ignored; both maps are then
    clamped to (0, cap]. With median_scaling the prediction is rescaled by
    median(gt)/median(pred) before clamping (the usual protocol for
    scale-ambiguous monocular predictions). The delta thresholds are strict
    (max(p/g, g/p) < 1.25**n). Returns None when no valid overlap exists.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground-truth shapes differ")
    valid = (gt > 0.0) & (pred > 0.0)
    if not valid.any():
        return None
    p = pred[valid]
    g = gt[valid]
    if median_scaling:
        p = p * np.median(g) / np.median(p)
    p = np.minimum(p, cap)
    g = np.minimum(g, cap)

    ratio = np.maximum(p / g, g / p)
    a1 = float((ratio < 1.25).mean())
    a2 = float((ratio < 1.25 ** 2).mean())
    a3 = float((ratio < 1.25 ** 3).mean())
    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    return DepthMetrics(abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3)


def _positions_relative_to_first(poses: list[PoseSE3]) -> np.ndarray:
    """Trajectory positions expressed in the first pose's frame."""
    T0 = pose_to_transform(poses[0])
    R0 = T0[:3, :3]
    t0 = T0[:3, 3]
    out = np.stack([R0.T @ (pose_to_transform(p)[:3, 3] - t0) for p in poses])
    return out


def ate_metric(pred_poses: list[PoseSE3], gt_poses: list[PoseSE3],
               snippet_len: int = 3) -> AteResult:
    """Absolute trajectory error over scale-aligned sliding snippets.

    Each window of snippet_len poses is rigidly aligned at its first frame,
    a single least-squares scale factor is applied to the prediction, and the
    mean Euclidean position error is recorded; the mean and standard
    deviation over all windows are reported.
    """
    if snippet_len < 2:
        raise ValueError("snippet_len must be at least 2")
    if len(pred_poses) != len(gt_poses):
        raise ValueError("trajectories must have equal length")
    if len(pred_poses) < snippet_len:
        raise ValueError("trajectory shorter than snippet length")
    errors = []
    for start in range(len(pred_poses) - snippet_len + 1):
        pw = _positions_relative_to_first(pred_poses[start:start + snippet_len])
        gw = _positions_relative_to_first(gt_poses[start:start + snippet_len])
        denom = float((pw * pw).sum())
        scale = float((gw * pw).sum()) / denom if denom > 0.0 else 1.0
        err = np.linalg.norm(scale * pw - gw, axis=1).mean()
        errors.append(err)
    errors = np.asarray(errors)
    return AteResult(mean=float(errors.mean()), std=float(errors.std()),
                     n_snippets=len(errors))
