"""Tracking metrics: center-error precision, IoU success AUC, and
scale-normalized precision.

Conventions (fixed for bit-stable tests): the success curve samples IoU
thresholds 0..1 in 0.05 steps and averages them uniformly; its threshold-0
point counts only frames with strictly positive overlap, so a no-overlap
record scores exactly 0 while a perfect one scores exactly 1.  Normalized
precision divides the center error by the ground-truth box diagonal and
averages the resulting curve over thresholds 0..0.5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)          # pixels
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)                     # IoU
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)              # fraction of diagonal


@dataclass
class TrackRecord:
    pred: np.ndarray       # (T, 4) x, y, w, h
    gt: np.ndarray         # (T, 4)
    image_size: tuple      # (W, H)

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(-1, 4)
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        if len(self.pred) != len(self.gt):
            raise ShapeError(f"{len(self.pred)} predictions vs {len(self.gt)} ground truths")
        if len(self.pred) == 0:
            raise ContractError("empty track record")
        if np.any(self.gt[:, 2:] < 0) or np.any(self.pred[:, 2:] < 0):
            raise ShapeError("negative box extents")

    def __len__(self):
        return len(self.pred)


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU of aligned box arrays; degenerate boxes score 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    iy = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    out = np.zeros(len(a))
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def center_errors(record: TrackRecord) -> np.ndarray:
    pc = record.pred[:, :2] + record.pred[:, 2:] / 2.0
    gc = record.gt[:, :2] + record.gt[:, 2:] / 2.0
    d = pc - gc
    return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)


def precision_curve(record: TrackRecord, thresholds: np.ndarray = PRECISION_THRESHOLDS) -> np.ndarray:
    """Fraction of frames with center error <= t, per threshold."""
    err = center_errors(record)
    return np.array([np.mean(err <= t) for t in thresholds])


def precision_at_20(record: TrackRecord) -> float:
    err = center_errors(record)
    return float(np.mean(err <= 20.0))


def success_curve(record: TrackRecord, thresholds: np.ndarray = SUCCESS_THRESHOLDS) -> np.ndarray:
    ious = iou(record.pred, record.gt)
    curve = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        curve[i] = np.mean(ious > 0) if t == 0 else np.mean(ious >= t)
    return curve


def success_auc(record: TrackRecord) -> float:
    """Uniform average of the sampled success curve."""
    return float(np.mean(success_curve(record)))


def normalized_precision(record: TrackRecord,
                         thresholds: np.ndarray = NORM_PRECISION_THRESHOLDS) -> float:
    """AUC of the center-error curve normalized by the GT box diagonal."""
    return float(np.mean(normalized_precision_curve(record, thresholds)))


def normalized_precision_curve(record: TrackRecord,
                               thresholds: np.ndarray = NORM_PRECISION_THRESHOLDS) -> np.ndarray:
    err = center_errors(record)
    diag = np.sqrt(record.gt[:, 2] ** 2 + record.gt[:, 3] ** 2)
    keep = diag > 0
    skipped = int(np.sum(~keep))
    if skipped:
        logger.warning("normalized precision skipped %d frames with zero-diagonal boxes", skipped)
    if not np.any(keep):
        raise ContractError("no frames with a valid ground-truth diagonal")
    norm_err = err[keep] / diag[keep]
    return np.array([np.mean(norm_err <= t) for t in thresholds])


def metric_report(record: TrackRecord) -> dict:
    return {
        "precision": precision_at_20(record),
        "success": success_auc(record),
        "norm_precision": normalized_precision(record),
    }


def curve_csv(thresholds: np.ndarray, values: np.ndarray) -> str:
    lines = ["threshold,value"]
    lines += [f"{t:.6g},{v:.6g}" for t, v in zip(thresholds, values)]
    return "\n".join(lines) + "\n"
