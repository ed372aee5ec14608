"""Pose accuracy metrics on world-space joints (mm) and image-space joints (px)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

PDJ_FRACTIONS = (0.05, 0.10, 0.15, 0.20)
DEFAULT_THRESHOLDS = tuple(float(t) for t in range(0, 81, 5))


def _check_pair(preds, gts) -> tuple:
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if p.ndim != 3:
        raise ValueError(f"expected (frames, joints, dims), got {p.shape}")
    return p, g


def joint_errors(preds, gts) -> np.ndarray:
    """Per-frame, per-joint Euclidean errors, shape (N, K)."""
    p, g = _check_pair(preds, gts)
    return np.sqrt(((p - g) ** 2).sum(axis=-1))


def mean_3d_error(preds, gts) -> float:
    return float(joint_errors(preds, gts).mean())


def success_frame_curve(preds, gts, thresholds: Sequence[float]) -> np.ndarray:
    """Fraction of frames whose worst joint error is below each threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("need at least one threshold")
    worst = joint_errors(preds, gts).max(axis=1)
    return (worst[None, :] < thresholds[:, None]).mean(axis=1)


def bbox_diagonal(points) -> np.ndarray:
    """Per-frame diagonal of the axis-aligned bounding box of (N, K, D) points."""
    p = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(p.max(axis=1) - p.min(axis=1), axis=-1)


def pdj(preds_px, gts_px, fraction: float, normalizer_px=None) -> float:
    """Fraction of joints whose image-plane error is below ``fraction * normalizer``.

    ``normalizer_px`` is a scalar or a per-frame array; by default the
    per-frame ground-truth bounding-box diagonal.
    """
    err = joint_errors(preds_px, gts_px)
    norm = bbox_diagonal(gts_px) if normalizer_px is None else np.broadcast_to(
        np.asarray(normalizer_px, dtype=np.float64), (err.shape[0],))
    if np.any(norm <= 0):
        raise ValueError("PDJ normalizer must be positive")
    return float((err < fraction * norm[:, None]).mean())


def map_10cm(preds, gts, radius_mm: float = 100.0):
    """Per-joint detection rate within ``radius_mm`` and its mean over joints."""
    per_joint = (joint_errors(preds, gts) < radius_mm).mean(axis=0)
    return per_joint, float(per_joint.mean())


@dataclass
class MetricReport:
    mean_error_mm: float
    per_joint_error_mm: np.ndarray
    thresholds_mm: np.ndarray
    success_rates: np.ndarray
    pdj: Dict[float, float]
    map_per_joint: np.ndarray
    map_mean: float
    frames: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricReport):
            return NotImplemented
        return self.to_csv() == other.to_csv()

    def rows(self):
        yield "mean_3d_error_mm", self.mean_error_mm
        yield "frames", self.frames
        for j, e in enumerate(self.per_joint_error_mm):
            yield f"joint_{j}_error_mm", e
        for t, s in zip(self.thresholds_mm, self.success_rates):
            yield f"success_below_{t:g}mm", s
        for f, v in self.pdj.items():
            yield f"pdj_{f:.2f}", v
        for j, v in enumerate(self.map_per_joint):
            yield f"ap10cm_joint_{j}", v
        yield "map_10cm", self.map_mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, repr(float(v)) if not isinstance(v, int) else v])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"frames: {self.frames}",
                 f"mean 3D error: {self.mean_error_mm:.3f} mm",
                 "success frames: " + ", ".join(f"<{t:g}mm {s:.3f}" for t, s in zip(self.thresholds_mm, self.success_rates)),
                 "PDJ: " + ", ".join(f"{f:.2f} {v:.3f}" for f, v in self.pdj.items()),
                 f"mAP@10cm: {self.map_mean:.4f}"]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.rows()}


def metric_report(world_pred, world_gt, px_pred, px_gt,
                  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                  pdj_fractions: Sequence[float] = PDJ_FRACTIONS,
                  pdj_normalizer=None) -> MetricReport:
    err = joint_errors(world_pred, world_gt)
    per_joint_ap, mean_ap = map_10cm(world_pred, world_gt)
    return MetricReport(
        mean_error_mm=float(err.mean()),
        per_joint_error_mm=err.mean(axis=0),
        thresholds_mm=np.asarray(thresholds, dtype=np.float64),
        success_rates=success_frame_curve(world_pred, world_gt, thresholds),
        pdj={float(f): pdj(px_pred, px_gt, f, pdj_normalizer) for f in pdj_fractions},
        map_per_joint=per_joint_ap,
        map_mean=mean_ap,
        frames=int(err.shape[0]),
    )
