"""
Box geometry
============
Axis-aligned boxes as (x1, y1, x2, y2), four-sided offsets from an anchor
location, IoU / GIoU (with gradients w.r.t. the predicted box) and greedy
class-wise NMS driven by the joint quality score.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from src.utils.errors import InvalidArgumentError, InvalidInputError

DEFAULT_IOU_THRESHOLD = 0.6
DEFAULT_SCORE_THRESHOLD = 0.05


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise InvalidInputError(f"box coordinates must be finite: {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidInputError(f"box needs x2 >= x1 and y2 >= y1: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class SideOffsets:
    l: float
    r: float
    t: float
    b: float

    def __post_init__(self):
        if min(self.l, self.r, self.t, self.b) < 0:
            raise InvalidInputError(f"offsets must be non-negative: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.r, self.t, self.b], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DetectionCandidate:
    """One scored location at inference time."""

    location: tuple
    box: Box
    joint_scores: np.ndarray
    real_iou: Optional[float] = None
    quality: Optional[float] = None
    gt_index: int = -1

    def __post_init__(self):
        scores = np.array(self.joint_scores, dtype=np.float64, copy=True)
        if scores.ndim != 1 or scores.size < 1:
            raise InvalidInputError("joint_scores must be a non-empty vector")
        if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
            raise InvalidInputError(f"joint_scores must lie in [0, 1], got {scores}")
        scores.setflags(write=False)
        object.__setattr__(self, "joint_scores", scores)

    @property
    def label(self) -> int:
        return int(np.argmax(self.joint_scores))

    @property
    def score(self) -> float:
        return float(self.joint_scores.max())


# ──────────────────────────────────────────────────────────────
# Offset encoding
# ──────────────────────────────────────────────────────────────

def decode(location, offsets: SideOffsets) -> Box:
    x, y = location
    return Box(x - offsets.l, y - offsets.t, x + offsets.r, y + offsets.b)


def encode(box: Box, location) -> SideOffsets:
    x, y = location
    if not (box.x1 <= x <= box.x2 and box.y1 <= y <= box.y2):
        raise InvalidInputError(f"location {location} lies outside {box}")
    return SideOffsets(x - box.x1, box.x2 - x, y - box.y1, box.y2 - y)


def decode_array(locations: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """locations (N, 2), offsets (N, 4) in l, r, t, b order -> boxes (N, 4)."""
    x, y = locations[:, 0], locations[:, 1]
    return np.stack([x - offsets[:, 0], y - offsets[:, 2],
                     x + offsets[:, 1], y + offsets[:, 3]], axis=1)


def encode_array(boxes: np.ndarray, locations: np.ndarray) -> np.ndarray:
    """Inverse of decode_array; offsets may be negative for outside locations."""
    x, y = locations[:, 0], locations[:, 1]
    return np.stack([x - boxes[:, 0], boxes[:, 2] - x,
                     y - boxes[:, 1], boxes[:, 3] - y], axis=1)


def box_grad_to_offsets(d_boxes: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. (x1, y1, x2, y2) onto (l, r, t, b)."""
    return np.stack([-d_boxes[:, 0], d_boxes[:, 2], -d_boxes[:, 1], d_boxes[:, 3]], axis=1)


# ──────────────────────────────────────────────────────────────
# Overlap measures
# ──────────────────────────────────────────────────────────────

def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_aligned(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of (N, 4) arrays. Zero union gives 0."""
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    union = _areas(a) + _areas(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) -> (N, M)."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(iou_aligned(a.as_array()[None], b.as_array()[None])[0])


def giou_aligned(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise GIoU and its gradient w.r.t. the ``pred`` coordinates.

    Returns (giou (N,), d_giou/d_pred (N, 4)). Subgradients at coordinate ties
    follow the branch taken by ``np.maximum``/``np.minimum`` on pred.
    """
    px1, py1, px2, py2 = pred.T
    gx1, gy1, gx2, gy2 = gt.T
    pw, ph = px2 - px1, py2 - py1
    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)

    # intersection
    ix1_p = px1 >= gx1
    iy1_p = py1 >= gy1
    ix2_p = px2 <= gx2
    iy2_p = py2 <= gy2
    iw_raw = np.where(ix2_p, px2, gx2) - np.where(ix1_p, px1, gx1)
    ih_raw = np.where(iy2_p, py2, gy2) - np.where(iy1_p, py1, gy1)
    w_on = iw_raw > 0
    h_on = ih_raw > 0
    iw = np.where(w_on, iw_raw, 0.0)
    ih = np.where(h_on, ih_raw, 0.0)
    inter = iw * ih
    union = area_p + area_g - inter

    # enclosing box
    cx1_p = px1 <= gx1
    cy1_p = py1 <= gy1
    cx2_p = px2 >= gx2
    cy2_p = py2 >= gy2
    cw = np.where(cx2_p, px2, gx2) - np.where(cx1_p, px1, gx1)
    ch = np.where(cy2_p, py2, gy2) - np.where(cy1_p, py1, gy1)
    enclose = cw * ch

    valid_u = union > 0
    valid_c = enclose > 0
    safe_u = np.where(valid_u, union, 1.0)
    safe_c = np.where(valid_c, enclose, 1.0)
    iou_v = np.where(valid_u, inter / safe_u, 0.0)
    giou_v = np.where(valid_c, iou_v - (enclose - union) / safe_c, iou_v)

    # d(area_p)/d(x1, y1, x2, y2)
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    # d(iw)/dx1, d(ih)/dy1, d(iw)/dx2, d(ih)/dy2
    d_iw_x1 = np.where(w_on & ix1_p, -1.0, 0.0)
    d_iw_x2 = np.where(w_on & ix2_p, 1.0, 0.0)
    d_ih_y1 = np.where(h_on & iy1_p, -1.0, 0.0)
    d_ih_y2 = np.where(h_on & iy2_p, 1.0, 0.0)
    d_inter = np.stack([ih * d_iw_x1, iw * d_ih_y1, ih * d_iw_x2, iw * d_ih_y2], axis=1)
    d_union = d_area - d_inter
    d_enclose = np.stack([
        ch * np.where(cx1_p, -1.0, 0.0),
        cw * np.where(cy1_p, -1.0, 0.0),
        ch * np.where(cx2_p, 1.0, 0.0),
        cw * np.where(cy2_p, 1.0, 0.0),
    ], axis=1)

    su = safe_u[:, None]
    sc = safe_c[:, None]
    d_iou = np.where(valid_u[:, None],
                     (d_inter * su - inter[:, None] * d_union) / su ** 2, 0.0)
    # giou = iou - 1 + union / enclose
    d_ratio = (d_union * sc - union[:, None] * d_enclose) / sc ** 2
    d_giou = np.where(valid_c[:, None], d_iou + d_ratio, d_iou)
    return giou_v, d_giou


def giou(a: Box, b: Box) -> tuple[float, np.ndarray]:
    """GIoU of ``a`` against ``b`` and its gradient w.r.t. a's (x1, y1, x2, y2)."""
    value, grad = giou_aligned(a.as_array()[None], b.as_array()[None])
    return float(value[0]), grad[0]


# ──────────────────────────────────────────────────────────────
# Non-maximum suppression
# ──────────────────────────────────────────────────────────────

def _check_thresholds(iou_threshold: float, score_threshold: float) -> None:
    for name, value in (("iou_threshold", iou_threshold), ("score_threshold", score_threshold)):
        if not 0.0 <= value <= 1.0:
            raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, labels: Optional[np.ndarray] = None,
                iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> np.ndarray:
    """Greedy NMS over arrays; returns kept input indices sorted by score.

    Candidates need score >= score_threshold; a candidate is suppressed by an
    earlier kept one of the same label when their IoU exceeds iou_threshold.
    Equal scores are ordered by input index. ``labels=None`` is class-agnostic.
    """
    _check_thresholds(iou_threshold, score_threshold)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)

    index = np.arange(scores.size)
    order = np.lexsort((index, -scores))
    order = order[scores[order] >= score_threshold]
    if order.size == 0:
        return np.zeros(0, dtype=np.int64)

    ious = iou_matrix(boxes[order], boxes[order])
    if labels is not None:
        lab = np.asarray(labels)[order]
        ious = np.where(lab[:, None] == lab[None, :], ious, 0.0)

    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for i in range(order.size):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed[i + 1:] |= ious[i, i + 1:] > iou_threshold
    return order[np.asarray(keep, dtype=np.int64)]


def nms(candidates: Sequence[DetectionCandidate],
        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
        score_threshold: float = DEFAULT_SCORE_THRESHOLD,
        per_class: bool = True) -> list[DetectionCandidate]:
    """Quality-score NMS: each candidate is ranked by its max joint score and
    labelled by its argmax class."""
    if not candidates:
        _check_thresholds(iou_threshold, score_threshold)
        return []
    boxes = np.stack([c.box.as_array() for c in candidates])
    scores = np.array([c.score for c in candidates])
    labels = np.array([c.label for c in candidates]) if per_class else None
    kept = nms_indices(boxes, scores, labels, iou_threshold, score_threshold)
    return [candidates[i] for i in kept]
