"""
Training objectives
===================
Quality Focal Loss on the joint score, Distribution Focal Loss on the edge
distributions, GIoU regression loss, and their weighted sum with the full
gradient set of a dense head.

Reduction follows the dense-detector recipe: QFL is summed over every
location and class, DFL and GIoU over positives only, and all three are
divided by the number of positives (at least 1).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.detection.distribution import (
    BinGrid, DistributionLogits, GeneralDistribution, StatLayout,
    expectation_backward, log_softmax, softmax_backward, stat_backward,
)
from src.detection.geometry import (
    Box, box_grad_to_offsets, encode_array, giou_aligned, iou_aligned,
)
from src.detection.quality_head import (
    ComposedCache, ComposedGrads, DgqpCache, DgqpGrads,
    composed_backward, dgqp_backward, sigmoid,
)
from src.utils.errors import InvalidArgumentError, InvalidInputError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "losses.log")

LOG_EPS = 1e-12


@dataclass(frozen=True)
class QflConfig:
    beta: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise InvalidArgumentError(f"QFL beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class LossWeights:
    qfl: float = 1.0
    dfl: float = 0.25
    giou: float = 2.0

    def __post_init__(self):
        values = (self.qfl, self.dfl, self.giou)
        if any(v < 0 or not np.isfinite(v) for v in values):
            raise InvalidArgumentError(f"loss weights must be finite and >= 0: {values}")
        if not any(values):
            raise InvalidArgumentError("at least one loss weight must be positive")


# ──────────────────────────────────────────────────────────────
# Quality Focal Loss
# ──────────────────────────────────────────────────────────────

def _modulator(diff: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """|d|^beta and its derivative w.r.t. d (0 at d = 0)."""
    ad = np.abs(diff)
    mod = ad ** beta
    with np.errstate(divide="ignore", invalid="ignore"):
        d_mod = np.where(ad > 0, beta * np.sign(diff) * ad ** (beta - 1.0), 0.0)
    return mod, d_mod


def quality_focal_loss(x: np.ndarray, target: np.ndarray, beta: float = 2.0,
                       from_logits: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise -|y - J|^beta ((1 - y) log(1 - J) + y log J).

    With ``from_logits`` the input is the pre-sigmoid logit and the returned
    gradient is w.r.t. that logit; otherwise the input is J itself.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if np.any((y < 0.0) | (y > 1.0)) or not np.all(np.isfinite(y)):
        raise InvalidInputError("QFL targets must lie in [0, 1]")

    if from_logits:
        j = sigmoid(x)
        bce = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        mod, d_mod = _modulator(j - y, beta)
        loss = mod * bce
        grad = d_mod * j * (1.0 - j) * bce + mod * (j - y)
        return loss, grad

    if np.any((x < 0.0) | (x > 1.0)):
        raise InvalidInputError("joint scores must lie in [0, 1]")
    jc = np.clip(x, LOG_EPS, 1.0 - LOG_EPS)
    bce = -(y * np.log(jc) + (1.0 - y) * np.log(1.0 - jc))
    mod, d_mod = _modulator(x - y, beta)
    loss = mod * bce
    grad = d_mod * bce + mod * (jc - y) / (jc * (1.0 - jc))
    return loss, grad


def qfl(j: float, target: float, cfg: QflConfig = QflConfig(),
        from_logits: bool = False) -> tuple[float, float]:
    """Scalar QFL: (loss, d loss / d input)."""
    loss, grad = quality_focal_loss(np.array([j]), np.array([target]), cfg.beta, from_logits)
    return float(loss[0]), float(grad[0])


# ──────────────────────────────────────────────────────────────
# Distribution Focal Loss
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DflResult:
    loss: np.ndarray
    grad: np.ndarray
    clamped: int


def dfl_target_weights(targets: np.ndarray, grid: BinGrid) -> tuple[np.ndarray, int]:
    """Linear-interpolation target over the bins, (N, n+1), and the clamp count."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    t = (targets - grid.y0) / grid.delta
    clamped = int(np.count_nonzero((t < 0.0) | (t > grid.n)))
    t = np.clip(t, 0.0, float(grid.n))
    left = np.minimum(np.floor(t).astype(np.int64), grid.n - 1)
    w_left = (left + 1) - t
    w_right = t - left
    weights = np.zeros((targets.size, grid.size))
    rows = np.arange(targets.size)
    weights[rows, left] = w_left
    weights[rows, left + 1] = w_right
    return weights, clamped


def distribution_focal_loss(logits: np.ndarray, targets: np.ndarray, grid: BinGrid,
                            log_probs: Optional[np.ndarray] = None) -> DflResult:
    """DFL per row of ``logits`` (N, n+1); gradient is w.r.t. the logits.

    Targets outside [y0, yn] are clamped and counted.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, grid.size)
    weights, clamped = dfl_target_weights(targets, grid)
    if clamped:
        logger.debug("DFL clamped %d targets into [%s, %s]", clamped, grid.y0, grid.yn)
    if log_probs is None:
        log_probs = log_softmax(logits)
    probs = np.exp(log_probs)
    loss = -(weights * log_probs).sum(axis=-1)
    return DflResult(loss=loss, grad=probs - weights, clamped=clamped)


def dfl(dist, target: float) -> tuple[float, np.ndarray]:
    """DFL of one side distribution; gradient w.r.t. its logits.

    ``dist`` may be a DistributionLogits or a GeneralDistribution (treated as
    the softmax of log P, with log clamped at 1e-12).
    """
    if isinstance(dist, DistributionLogits):
        res = distribution_focal_loss(dist.logits[None], np.array([target]), dist.grid)
    elif isinstance(dist, GeneralDistribution):
        log_p = np.log(np.clip(dist.probs, LOG_EPS, None))[None]
        res = distribution_focal_loss(log_p, np.array([target]), dist.grid, log_probs=log_p)
    else:
        raise InvalidInputError(f"unsupported distribution type {type(dist).__name__}")
    if res.clamped:
        logger.warning("DFL target %.4f outside grid [%s, %s] was clamped",
                       target, dist.grid.y0, dist.grid.yn)
    return float(res.loss[0]), res.grad[0]


# ──────────────────────────────────────────────────────────────
# GIoU loss
# ──────────────────────────────────────────────────────────────

def giou_loss(pred: Box, gt: Box) -> tuple[float, np.ndarray]:
    """1 - GIoU and its gradient w.r.t. pred (x1, y1, x2, y2)."""
    value, grad = giou_aligned(pred.as_array()[None], gt.as_array()[None])
    return float(1.0 - value[0]), -grad[0]


# ──────────────────────────────────────────────────────────────
# Aggregate
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Prediction:
    """Per-location head outputs for one batch.

    ``cls_logits`` are class logits, except for the composed form where they
    are the joint logits produced by the composed head.
    """

    grid: BinGrid
    locations: np.ndarray
    cls_logits: np.ndarray
    reg_logits: np.ndarray
    probs: np.ndarray
    boxes: np.ndarray
    layout: Optional[StatLayout] = None
    stat: Optional[np.ndarray] = None
    stat_index: Optional[np.ndarray] = None
    quality: Optional[np.ndarray] = None
    dgqp_cache: Optional[DgqpCache] = None
    composed_cache: Optional[ComposedCache] = None

    @property
    def joint_mode(self) -> str:
        if self.composed_cache is not None:
            return "composed"
        if self.quality is not None:
            return "decomposed"
        return "classification"

    @property
    def class_scores(self) -> np.ndarray:
        return sigmoid(self.cls_logits)

    @property
    def joint(self) -> np.ndarray:
        if self.joint_mode == "decomposed":
            return self.class_scores * self.quality[:, None]
        return self.class_scores


@dataclass(frozen=True, eq=False)
class Assignment:
    labels: np.ndarray
    gt_boxes: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_pos(self) -> int:
        return int(np.count_nonzero(self.positive))


@dataclass(frozen=True, eq=False)
class LossGrads:
    cls_logits: np.ndarray
    reg_logits: np.ndarray
    dgqp: Optional[DgqpGrads] = None
    composed: Optional[ComposedGrads] = None


@dataclass(frozen=True, eq=False)
class LossResult:
    total: float
    qfl: float
    qfl_pos: float
    dfl: float
    giou: float
    num_pos: int
    clamped: int
    iou_targets: np.ndarray
    grads: LossGrads


def total_loss(pred: Prediction, assign: Assignment, weights: LossWeights = LossWeights(),
               qfl_cfg: QflConfig = QflConfig(), detach_stats: bool = False,
               iou_targets: Optional[np.ndarray] = None) -> LossResult:
    """Weighted QFL + DFL + GIoU and gradients for every head output.

    ``iou_targets`` fixes the QFL soft targets (normally recomputed from the
    current boxes and treated as constants); passing them keeps a loss
    evaluation comparable across perturbed parameters.
    """
    n_loc, m = pred.cls_logits.shape
    if n_loc < 1:
        raise InvalidInputError("total_loss needs at least one location")
    pos = assign.positive
    num_pos = assign.num_pos
    norm = float(max(num_pos, 1))
    labels = assign.labels

    if iou_targets is None:
        iou_targets = np.zeros(n_loc)
        if num_pos:
            iou_targets[pos] = iou_aligned(pred.boxes[pos], assign.gt_boxes[pos])
    soft = np.zeros((n_loc, m))
    soft[pos, labels[pos]] = iou_targets[pos]

    d_probs = np.zeros_like(pred.probs)
    d_reg = np.zeros_like(pred.reg_logits)
    dgqp_grads = None
    composed_grads = None
    d_stat = None
    q_scale = weights.qfl / norm

    # QFL over every location and class
    mode = pred.joint_mode
    if mode == "decomposed":
        c = sigmoid(pred.cls_logits)
        q = pred.quality[:, None]
        q_el, d_joint = quality_focal_loss(c * q, soft, qfl_cfg.beta, from_logits=False)
        d_joint = d_joint * q_scale
        d_cls = d_joint * q * c * (1.0 - c)
        d_quality = (d_joint * c).sum(axis=1)
        dgqp_grads = dgqp_backward(pred.dgqp_cache.params, pred.dgqp_cache, d_quality)
        d_stat = dgqp_grads.feature
    else:
        q_el, d_logit = quality_focal_loss(pred.cls_logits, soft, qfl_cfg.beta, from_logits=True)
        d_cls = d_logit * q_scale
        if mode == "composed":
            composed_grads = composed_backward(pred.composed_cache.params, pred.composed_cache, d_cls)
            d_stat = composed_grads.stat
    qfl_value = float(q_el.sum() / norm)
    qfl_pos = float(q_el[pos].sum() / norm)

    if d_stat is not None and not detach_stats:
        width = pred.layout.width
        d_blocks = d_stat.reshape(n_loc, 4, width)
        d_probs += stat_backward(pred.probs, pred.stat_index, d_blocks, pred.layout)

    # DFL and GIoU over positives
    dfl_value = 0.0
    giou_value = 0.0
    clamped = 0
    if num_pos:
        grid = pred.grid
        gt = assign.gt_boxes[pos]
        side_targets = encode_array(gt, pred.locations[pos])
        res = distribution_focal_loss(pred.reg_logits[pos].reshape(-1, grid.size),
                                      side_targets.reshape(-1), grid)
        clamped = res.clamped
        dfl_value = float(res.loss.sum() / norm)
        d_reg[pos] += (weights.dfl / norm) * res.grad.reshape(num_pos, 4, grid.size)

        g, d_g = giou_aligned(pred.boxes[pos], gt)
        giou_value = float((1.0 - g).sum() / norm)
        d_offsets = box_grad_to_offsets(-d_g * (weights.giou / norm))
        d_probs[pos] += expectation_backward(d_offsets, grid.centers)

    d_reg += softmax_backward(pred.probs, d_probs)
    total = weights.qfl * qfl_value + weights.dfl * dfl_value + weights.giou * giou_value
    return LossResult(
        total=float(total), qfl=qfl_value, qfl_pos=qfl_pos, dfl=dfl_value,
        giou=giou_value, num_pos=num_pos, clamped=clamped, iou_targets=iou_targets,
        grads=LossGrads(cls_logits=d_cls, reg_logits=d_reg, dgqp=dgqp_grads,
                        composed=composed_grads),
    )
