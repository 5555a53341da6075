"""Evaluation metrics: orientation precision, keypoint precision, Hausdorff distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

DEFAULT_THRESHOLDS = (5.0, 15.0, 30.0)


class UndefinedMetricError(ValueError):
    """A metric was asked for over an empty set."""


@dataclass(frozen=True)
class ViewRecord:
    """2D box ``(x0, y0, x1, y1)`` in pixels and azimuth in degrees."""

    bbox: tuple
    azimuth: float


def angle_diff(a, b):
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 360.0
    return np.minimum(d, 360.0 - d)


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def aop(predictions, ground_truth, angle_threshold: float, iou_threshold: float = 0.7) -> float:
    """Fraction of matched pairs with IoU > iou_threshold and azimuth error <= angle_threshold."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must be matched lists")
    if not predictions:
        raise UndefinedMetricError("AOP of an empty set")
    hits = 0
    for p, g in zip(predictions, ground_truth):
        if box_iou(p.bbox, g.bbox) > iou_threshold and angle_diff(p.azimuth, g.azimuth) <= angle_threshold:
            hits += 1
    return hits / len(predictions)


def aop_table(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS, iou_threshold: float = 0.7) -> dict:
    return {float(t): aop(predictions, ground_truth, t, iou_threshold) for t in thresholds}


@dataclass
class APKResult:
    per_keypoint: np.ndarray
    mean: float
    counts: np.ndarray


def apk(pred_kps, gt_kps, bbox, alpha: float = 0.1) -> APKResult:
    """Keypoint precision: correct iff pixel error <= alpha * max(h, w) of the box.

    Accepts one instance ((K, 2) keypoints, one box) or a batch ((M, K, 2),
    (M, 4)).  Keypoints with NaN ground truth are skipped; a keypoint that
    is never scored gets NaN precision and is left out of the mean.
    """
    P = np.asarray(pred_kps, dtype=float)
    G = np.asarray(gt_kps, dtype=float)
    B = np.asarray(bbox, dtype=float)
    if P.ndim == 2:
        P, G, B = P[None], G[None], B[None]
    if P.shape != G.shape or B.shape != (P.shape[0], 4):
        raise ValueError("keypoint arrays and boxes do not match")
    h = B[:, 3] - B[:, 1]
    w = B[:, 2] - B[:, 0]
    if np.any(h <= 0) or np.any(w <= 0):
        raise ValueError("boxes need positive height and width")
    thr = alpha * np.maximum(h, w)
    scored = np.all(np.isfinite(G), axis=2)
    err = np.linalg.norm(P - G, axis=2)
    correct = scored & np.isfinite(err) & (np.where(np.isfinite(err), err, np.inf) <= thr[:, None])
    counts = scored.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(counts > 0, correct.sum(axis=0) / np.maximum(counts, 1), np.nan)
    valid = counts > 0
    if not valid.any():
        raise UndefinedMetricError("APK with no scored keypoints")
    return APKResult(per, float(per[valid].mean()), counts)


def hausdorff(A, B) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise UndefinedMetricError("Hausdorff distance of an empty set")
    D = cdist(A, B)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def mean_abs_angle_error(predictions, ground_truth) -> float:
    """Mean wrapped absolute azimuth difference in degrees."""
    p = np.asarray(predictions, dtype=float).reshape(-1)
    g = np.asarray(ground_truth, dtype=float).reshape(-1)
    if p.size != g.size:
        raise ValueError("predictions and ground truth must be matched lists")
    if p.size == 0:
        raise UndefinedMetricError("mean angle error of an empty set")
    return float(angle_diff(p, g).mean())


def similarity_align(A, B):
    """Scale, rotation and translation best mapping A onto B (least squares).

    Returns:
        (aligned A, (s, R, t)) with aligned = s * A @ R.T + t.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ma, mb = A.mean(0), B.mean(0)
    A0, B0 = A - ma, B - mb
    U, S, Vt = np.linalg.svd(B0.T @ A0)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    va = (A0 ** 2).sum()
    s = float((S * np.diag(D)).sum() / va) if va > 0 else 1.0
    t = mb - s * R @ ma
    return s * A @ R.T + t, (s, R, t)


def shape_diameter(X) -> float:
    X = np.asarray(X, dtype=float)
    return float(cdist(X, X).max())


@dataclass
class MetricReport:
    aop: dict
    mean_abs_angle_error: float
    apk_per_keypoint: list
    apk_mean: float
    hausdorff: float
    mean_rotation_error: float | None = None
    count: int = 0
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "aop": {f"{k:g}": v for k, v in self.aop.items()},
            "mean_abs_angle_error_deg": self.mean_abs_angle_error,
            "mean_rotation_error_deg": self.mean_rotation_error,
            "apk_mean": self.apk_mean,
            "apk_per_keypoint": [None if not np.isfinite(v) else float(v) for v in self.apk_per_keypoint],
            "hausdorff_m": self.hausdorff,
            "excluded": list(self.excluded),
        }

    def table(self, keypoint_names=None) -> str:
        """Aligned plain-text table."""
        th = list(self.aop)
        head = ["n"] + [f"AOP<={t:g}" for t in th] + ["MAE(deg)", "APK", "Hausdorff(m)"]
        row = [str(self.count)] + [f"{self.aop[t]:.4f}" for t in th] + [
            f"{self.mean_abs_angle_error:.3f}", f"{self.apk_mean:.4f}", f"{self.hausdorff:.4f}"]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        lines = ["  ".join(a.rjust(w) for a, w in zip(head, widths)),
                 "  ".join(b.rjust(w) for b, w in zip(row, widths))]
        if keypoint_names is not None:
            wn = max(len(n) for n in keypoint_names)
            lines.append("")
            lines.append(f"{'keypoint'.ljust(wn)}  APK")
            for n, v in zip(keypoint_names, self.apk_per_keypoint):
                lines.append(f"{n.ljust(wn)}  {'n/a' if not np.isfinite(v) else f'{v:.4f}'}")
        return "\n".join(lines) + "\n"
