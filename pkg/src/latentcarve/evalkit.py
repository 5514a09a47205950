"""Pose-accuracy metrics and recall/AUC summaries.

All metrics take object-to-camera poses as RigidTransform and a model point
set sampled on the object surface. ADD-S uses exact O(n^2) nearest neighbors
(fine at the default 2048 points). AUC integrates recall over a uniform
left-closed grid of 1000 thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import EmptyInput

AUC_GRID = 1000


@dataclass(frozen=True, eq=False)
class ModelPoints:
    """Object-frame surface samples with the model diameter in meters."""

    points: np.ndarray
    diameter: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 3:
            raise ValueError("need at least 3 model points")
        object.__setattr__(self, "points", pts)


def metric_add(points: ModelPoints, pose_gt: geo.RigidTransform, pose_pred: geo.RigidTransform) -> float:
    """Mean distance between correspondingly transformed model points."""
    a = pose_pred.apply(points.points)
    b = pose_gt.apply(points.points)
    return float(np.linalg.norm(a - b, axis=1).mean())


def metric_add_s(points: ModelPoints, pose_gt: geo.RigidTransform, pose_pred: geo.RigidTransform) -> float:
    """Mean distance from each predicted-transformed point to the closest GT point."""
    a = pose_pred.apply(points.points)
    b = pose_gt.apply(points.points)
    total = 0.0
    chunk = 512
    for i in range(0, len(a), chunk):
        d2 = ((a[i : i + chunk, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        total += np.sqrt(d2.min(axis=1)).sum()
    return float(total / len(a))


def metric_proj2d(
    points: ModelPoints,
    pose_gt: geo.RigidTransform,
    pose_pred: geo.RigidTransform,
    intrinsics: geo.CameraIntrinsics,
) -> float:
    """Mean pixel distance between projections under the two poses."""
    uv_pred, _ = geo.project(intrinsics, pose_pred.apply(points.points))
    uv_gt, _ = geo.project(intrinsics, pose_gt.apply(points.points))
    return float(np.linalg.norm(uv_pred - uv_gt, axis=1).mean())


def metric_angle_trans(pose_gt: geo.RigidTransform, pose_pred: geo.RigidTransform) -> tuple[float, float]:
    """(geodesic rotation error in degrees, translation error in meters)."""
    dot = abs(float(pose_gt.rotation @ pose_pred.rotation))
    angle = 2.0 * np.degrees(np.arccos(min(1.0, dot)))
    trans = float(np.linalg.norm(pose_gt.translation - pose_pred.translation))
    return angle, trans


def recall_and_auc(values, threshold_max: float, diameter: float | None = None) -> dict:
    """Recall curve and its mean over a uniform left-closed threshold grid.

    recall(tau) is the fraction of values <= tau; AUC is the mean recall over
    AUC_GRID thresholds i/AUC_GRID * threshold_max. When `diameter` is given,
    the single-threshold recall at 0.1 * diameter is included as well.
    """
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise EmptyInput("no metric values")
    if not np.all(np.isfinite(values)) or values.min() < 0:
        raise ValueError("metric values must be finite and non-negative")
    thresholds = np.arange(AUC_GRID) / AUC_GRID * threshold_max
    recalls = (values[None, :] <= thresholds[:, None]).mean(axis=1)
    out = {
        "auc": float(recalls.mean()),
        "thresholds": thresholds,
        "recalls": recalls,
        "n": int(values.size),
    }
    if diameter is not None:
        out["recall_at_tenth_diameter"] = float((values <= 0.1 * diameter).mean())
    return out


def symmetry_poses(pose_gt: geo.RigidTransform, symmetry: list[np.ndarray] | None):
    """Ground-truth pose composed with each member of the symmetry group."""
    if not symmetry:
        return [pose_gt]
    out = []
    for q in symmetry:
        sym = geo.RigidTransform(np.asarray(q, dtype=float), np.zeros(3))
        out.append(pose_gt.compose(sym))
    return out


def evaluate_poses(
    points: ModelPoints,
    pose_pairs: list[tuple[geo.RigidTransform, geo.RigidTransform]],
    intrinsics: geo.CameraIntrinsics,
    symmetry: list[np.ndarray] | None = None,
    add_range: float = 0.10,
    proj_range: float = 40.0,
) -> dict:
    """Per-frame metrics plus AUC summaries for (gt, predicted) pose pairs.

    Symmetric objects supply their symmetry group as unit quaternions; ADD,
    Proj.2D and the angular error are then minimized over the group (ADD-S is
    symmetry-agnostic by construction).
    """
    if not pose_pairs:
        raise EmptyInput("no pose pairs")
    frames = []
    for gt, pred in pose_pairs:
        candidates = symmetry_poses(gt, symmetry)
        add = min(metric_add(points, g, pred) for g in candidates)
        proj = min(metric_proj2d(points, g, pred, intrinsics) for g in candidates)
        angle = min(metric_angle_trans(g, pred)[0] for g in candidates)
        adds = metric_add_s(points, gt, pred)
        trans = metric_angle_trans(gt, pred)[1]
        frames.append({"add": add, "adds": adds, "proj2d": proj, "angle_deg": angle, "trans_m": trans})
    summary = {
        "add_auc": recall_and_auc([f["add"] for f in frames], add_range)["auc"],
        "adds_auc": recall_and_auc([f["adds"] for f in frames], add_range)["auc"],
        "proj2d_auc": recall_and_auc([f["proj2d"] for f in frames], proj_range)["auc"],
        "recall_at_0.1d": recall_and_auc([f["add"] for f in frames], add_range, points.diameter)[
            "recall_at_tenth_diameter"
        ],
        "n_frames": len(frames),
    }
    return {"frames": frames, "summary": summary}
