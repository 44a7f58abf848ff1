"""Photometric, anchored-depth and edge-aware smoothness losses.

Anchors are projections of point-cloud points into the training views. Each
carries the camera depth of its point and a confidence weight derived from
how consistent the point's color is across views and with its own color.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera, project_points
from .field import bilinear_sample
from .scene import PointCloud

__all__ = [
    "KeypointAnchor", "Anchors", "LossReport", "STAGES", "stage_weights",
    "color_loss", "color_error", "adaptive_weight", "build_anchors",
    "depth_loss", "smoothness_loss", "total_loss", "save_anchors",
]

DEPTH_GUIDED, SMOOTH = "depth_guided", "smooth"
STAGES = {DEPTH_GUIDED: (0.001, 0.0), SMOOTH: (0.0, 1.0)}


@dataclass(frozen=True)
class KeypointAnchor:
    view_id: int
    u: float
    v: float
    depth: float
    weight: float
    point_index: int


@dataclass
class Anchors:
    """Column-wise anchor table; ``view_id`` indexes the dataset's camera list."""

    view_id: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    weight: np.ndarray
    point_index: np.ndarray

    def __len__(self) -> int:
        return len(self.depth)

    def __getitem__(self, i) -> KeypointAnchor:
        return KeypointAnchor(int(self.view_id[i]), float(self.uv[i, 0]), float(self.uv[i, 1]),
                              float(self.depth[i]), float(self.weight[i]), int(self.point_index[i]))

    def subset(self, idx) -> "Anchors":
        return Anchors(self.view_id[idx], self.uv[idx], self.depth[idx],
                       self.weight[idx], self.point_index[idx])


@dataclass
class LossReport:
    L_color: float
    L_depth: float | None
    L_smooth: float | None
    L_total: float
    lambda_depth: float
    lambda_smooth: float


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    tape = like.tape if like is not None else ad.Tape(record=False)
    return tape.const(x)


def color_loss(pred, gt) -> Tensor:
    """Mean over rays and channels of the squared color error."""
    pred = _as_tensor(pred)
    gt_v = gt.value if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_v.shape:
        raise ad.ShapeError(f"color_loss: {pred.shape} vs {gt_v.shape}")
    return ad.mean(ad.square(pred - gt_v))


def color_error(c_i, c_j) -> np.ndarray:
    """One third of the L1 distance between colors (last axis)."""
    return np.abs(np.asarray(c_i, dtype=np.float64) - np.asarray(c_j, dtype=np.float64)).sum(-1) / 3.0


def adaptive_weight(e1, e2) -> np.ndarray:
    return np.clip((1.0 - np.asarray(e1) - np.asarray(e2)) ** 2, 0.0, 1.0)


def build_anchors(cloud: PointCloud, cameras: list[Camera], images: list[np.ndarray],
                  view_ids: list[int] | None = None) -> Anchors:
    """Project every cloud point into the given views and weight each projection.

    ``cameras``/``images`` are the reference views; ``view_ids`` labels them
    (defaults to 0..M-1). Per point, the spread term averages the color error
    to the mean projected color over the M' views that see it, normalized by
    M' - 1; points seen by fewer than two views are dropped. Occlusion is not
    tested.
    """
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    if len(cameras) < 2:
        raise ValueError("need at least two views to build anchors")
    view_ids = list(range(len(cameras))) if view_ids is None else list(view_ids)
    M, P = len(cameras), len(cloud)
    uv = np.zeros((M, P, 2))
    depth = np.zeros((M, P))
    vis = np.zeros((M, P), dtype=bool)
    cols = np.zeros((M, P, 3))
    for k, (cam, img) in enumerate(zip(cameras, images)):
        uv[k], depth[k], vis[k] = project_points(cam, cloud.points)
        if vis[k].any():
            cols[k, vis[k]] = bilinear_sample(np.asarray(img, dtype=np.float64), uv[k, vis[k]])
    n_vis = vis.sum(axis=0)
    keep = n_vis >= 2
    mean_col = (cols * vis[..., None]).sum(axis=0) / np.maximum(n_vis, 1)[:, None]
    spread = (color_error(cols, mean_col[None]) * vis).sum(axis=0)
    e1 = np.sqrt(spread / np.maximum(n_vis - 1, 1))
    e2 = color_error(cols, cloud.colors[None])
    w = adaptive_weight(e1[None], e2)
    sel = vis & keep[None]
    p_idx, k_idx = np.nonzero(sel.T)  # point-major order
    return Anchors(np.array(view_ids)[k_idx], uv[k_idx, p_idx], depth[k_idx, p_idx],
                   w[k_idx, p_idx], p_idx)


def save_anchors(anchors: Anchors, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view_id", "u", "v", "depth", "weight", "point_index"])
        for i in range(len(anchors)):
            a = anchors[i]
            w.writerow([a.view_id, repr(a.u), repr(a.v), repr(a.depth), repr(a.weight), a.point_index])


def depth_loss(pred_depth, target_depth, weights) -> Tensor:
    """``mean(w * (pred - target)^2)`` over the sampled anchors."""
    pred = _as_tensor(pred_depth)
    if pred.value.size == 0:
        raise ValueError("depth_loss needs at least one anchor")
    target = np.asarray(target_depth, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != target.shape or target.shape != weights.shape:
        raise ad.ShapeError("depth_loss: prediction, target and weight shapes differ")
    return ad.mean(ad.square(pred - target) * weights)


def smoothness_loss(disparity, rgb) -> Tensor:
    """Edge-aware first-order smoothness of an (S, S) disparity patch.

    Image gradients gate the penalty and are treated as constants.
    """
    disp = _as_tensor(disparity)
    img = rgb.value if isinstance(rgb, Tensor) else np.asarray(rgb, dtype=np.float64)
    H, W = disp.shape
    if H < 2 or W < 2:
        raise ValueError("smoothness_loss needs a patch of at least 2x2")
    if img.shape[:2] != (H, W):
        raise ad.ShapeError("smoothness_loss: disparity and image sizes differ")
    gate_x = np.exp(-np.abs(np.diff(img, axis=1)).mean(-1))
    gate_y = np.exp(-np.abs(np.diff(img, axis=0)).mean(-1))
    dx = ad.abs(disp[:, 1:] - disp[:, :-1])
    dy = ad.abs(disp[1:, :] - disp[:-1, :])
    return ad.mean(dx * gate_x) + ad.mean(dy * gate_y)


def stage_weights(stage: str) -> tuple[float, float]:
    try:
        return STAGES[stage]
    except KeyError:
        raise ValueError(f"unknown stage {stage!r}") from None


def total_loss(L_color, L_depth, L_smooth, stage: str, weights: tuple[float, float] | None = None):
    """Weighted sum for ``stage``; a term whose weight is zero is skipped.

    Terms may be tensors or floats (or None when skipped). ``weights``
    overrides the stage's nominal (depth, smoothness) weights. Returns the
    total (same kind as ``L_color``) and a :class:`LossReport`.
    """
    lam1, lam2 = stage_weights(stage) if weights is None else weights
    total = L_color
    if lam1:
        total = total + lam1 * L_depth
    if lam2:
        total = total + lam2 * L_smooth

    def val(x):
        return None if x is None else float(x.item() if isinstance(x, Tensor) else x)

    report = LossReport(val(L_color), val(L_depth) if lam1 else None,
                        val(L_smooth) if lam2 else None, val(total), lam1, lam2)
    return total, report
