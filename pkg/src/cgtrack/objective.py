"""Training objective: Gaussian-penalty focal loss on the score map plus
GIoU and L1 regression of the box read out at the ground-truth cell.

Boxes here are (cx, cy, w, h) normalized to the search crop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .lgch import HeadOutputs
from .ndcore import NDArray

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
FOCAL_EPS = 1e-6
MIN_OVERLAP = 0.7


@dataclass(frozen=True)
class LossWeights:
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0


@dataclass
class TargetMaps:
    cls_target: np.ndarray     # [N,1,g,g]
    center_cell: np.ndarray    # [N,2] (row i, col j)
    offset_target: np.ndarray  # [N,2] (x, y)
    size_target: np.ndarray    # [N,2] (w, h)

    @property
    def boxes(self) -> np.ndarray:
        g = self.cls_target.shape[-1]
        i, j = self.center_cell[:, 0], self.center_cell[:, 1]
        cx = (j + self.offset_target[:, 0]) / g
        cy = (i + self.offset_target[:, 1]) / g
        return np.stack([cx, cy, self.size_target[:, 0], self.size_target[:, 1]], axis=1)


def gaussian_radius(h: float, w: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest corner displacement keeping IoU >= min_overlap (corner-point
    formulation; three cases, smallest root wins)."""
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def make_targets(gt_box, grid: int = 16) -> TargetMaps:
    """Targets for one normalized (cx, cy, w, h) box."""
    cx, cy, w, h = (float(v) for v in gt_box)
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate box {gt_box}: width and height must be positive")
    if not (0 <= cx <= 1 and 0 <= cy <= 1):
        raise ValueError(f"box center {cx, cy} outside the unit square")
    j = min(int(math.floor(cx * grid)), grid - 1)
    i = min(int(math.floor(cy * grid)), grid - 1)
    radius = max(1, int(gaussian_radius(h * grid, w * grid)))
    sigma = (2 * radius + 1) / 6
    rows, cols = np.mgrid[0:grid, 0:grid]
    heat = np.exp(-((rows - i) ** 2 + (cols - j) ** 2) / (2 * sigma ** 2))
    heat[heat < np.finfo(np.float64).eps] = 0.0
    return TargetMaps(
        cls_target=heat[None, None],
        center_cell=np.array([[i, j]]),
        offset_target=np.array([[cx * grid - j, cy * grid - i]]),
        size_target=np.array([[w, h]]),
    )


def stack_targets(targets: list[TargetMaps]) -> TargetMaps:
    return TargetMaps(
        np.concatenate([t.cls_target for t in targets]),
        np.concatenate([t.center_cell for t in targets]),
        np.concatenate([t.offset_target for t in targets]),
        np.concatenate([t.size_target for t in targets]),
    )


def focal_loss(pred: NDArray, target: np.ndarray, alpha: float = FOCAL_ALPHA, beta: float = FOCAL_BETA,
               eps: float = FOCAL_EPS) -> NDArray:
    """-(1/N_pos) * sum over cells of
    (1-p)^a log p            where y == 1
    (1-y)^b p^a log(1-p)     elsewhere."""
    pred = nd.as_array(pred)
    if pred.shape != target.shape:
        raise nd.DimensionError(f"focal_loss: prediction {pred.shape} vs target {target.shape}")
    dt = pred.dtype
    pos = (target == 1).astype(dt)
    neg_weight = ((1 - target) ** beta * (1 - pos)).astype(dt)
    n_pos = max(float(pos.sum()), 1.0)
    p = nd.clip(pred, eps, 1 - eps)
    one_minus = 1.0 - p
    pos_term = nd.log(p) * one_minus ** alpha * NDArray(pos)
    neg_term = nd.log(one_minus) * p ** alpha * NDArray(neg_weight)
    return (pos_term + neg_term).sum() * (-1.0 / n_pos)


def _as_boxes(b) -> NDArray:
    if isinstance(b, NDArray):
        return b if b.ndim == 2 else b.reshape(1, 4)
    return NDArray(np.asarray(b, dtype=np.float64).reshape(-1, 4))


def _corners(b: NDArray):
    cx, cy, w, h = (b[:, k] for k in range(4))
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou(a, b) -> NDArray:
    """Generalized IoU per box pair; pairs with zero union give 0."""
    a, b = _as_boxes(a), _as_boxes(b)
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    zero = NDArray(np.zeros(a.shape[0]), dtype=a.dtype)
    iw = nd.maximum(nd.minimum(ax2, bx2) - nd.maximum(ax1, bx1), zero)
    ih = nd.maximum(nd.minimum(ay2, by2) - nd.maximum(ay1, by1), zero)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    hull = (nd.maximum(ax2, bx2) - nd.minimum(ax1, bx1)) * (nd.maximum(ay2, by2) - nd.minimum(ay1, by1))
    valid = (union.data > 0).astype(a.dtype)
    # keep denominators positive on degenerate pairs, then mask them to 0
    pad = NDArray(1.0 - valid)
    safe_union = union + pad
    safe_hull = hull + NDArray((hull.data <= 0).astype(a.dtype))
    value = inter / safe_union - (hull - union) / safe_hull
    return value * NDArray(valid)


def giou_loss(a, b) -> NDArray:
    return (1.0 - giou(a, b)).mean()


def l1_box(a, b) -> NDArray:
    a, b = _as_boxes(a), _as_boxes(b)
    return nd.abs(a - b).mean()


def predicted_boxes(outputs: HeadOutputs, cells: np.ndarray) -> NDArray:
    """(cx, cy, w, h) read out of the offset/size maps at the given cells."""
    g = outputs.offset.shape[-1]
    n = outputs.offset.shape[0]
    batch = np.arange(n)
    i, j = cells[:, 0], cells[:, 1]
    off = outputs.offset[batch, :, i, j]  # [N,2]
    size = outputs.size[batch, :, i, j]
    base = NDArray(np.stack([j, i], axis=1).astype(off.dtype))
    centers = (off + base) * (1.0 / g)
    return nd.concat([centers, size], axis=1)


def total_loss(outputs: HeadOutputs, targets: TargetMaps, weights: LossWeights = LossWeights()):
    """Returns (total, parts) with parts holding focal/giou/l1 terms."""
    focal = focal_loss(outputs.score, targets.cls_target.astype(outputs.score.dtype))
    pred = predicted_boxes(outputs, targets.center_cell)
    gt = NDArray(targets.boxes.astype(pred.dtype))
    g_loss = giou_loss(pred, gt)
    l1 = l1_box(pred, gt)
    total = focal + g_loss * weights.lambda_giou + l1 * weights.lambda_l1
    return total, {"focal": focal, "giou": g_loss, "l1": l1}
