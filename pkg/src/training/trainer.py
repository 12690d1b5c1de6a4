"""
Training loop and evaluation
============================
Single-writer SGD training of the dense head on a scene stream, and the
inference pass that produces per-candidate quality records and post-NMS
detections for the analysis reports.

Batches are formed by concatenating the locations of ``batch_scenes``
consecutive scenes (stream indices step * batch_scenes + j), so the loss
normalization by positive count is per batch.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.detection.geometry import (
    DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD, iou_aligned, iou_matrix, nms_indices,
)
from src.detection.losses import Assignment, LossResult, LossWeights, QflConfig, total_loss
from src.scenes.sources import BaseSceneSource
from src.scenes.synthgen import Scene
from src.training.checkpoint import Checkpoint, fresh_checkpoint
from src.training.head import HeadOutput, HeadVariant, VariantKind, backward, copy_state, forward
from src.training.optim import build_optimizer, clip_by_global_norm, step_decay
from src.utils.errors import InvalidArgumentError, InvalidInputError, TrainingDivergedError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "trainer.log")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_scenes: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    grad_clip: float = 10.0
    lr_steps: tuple = ()
    lr_gamma: float = 0.1
    seed: int = 0
    grid_n: int = 16
    log_every: int = 50
    workers: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    qfl: QflConfig = field(default_factory=QflConfig)

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if self.steps < 1:
            raise InvalidArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.batch_scenes < 1:
            raise InvalidArgumentError(f"batch_scenes must be >= 1, got {self.batch_scenes}")
        # lr = 0 is a legal no-op run
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.grad_clip < 0 or self.log_every < 0:
            raise InvalidArgumentError("grad_clip and log_every must be >= 0")

    def lr_at(self, step: int) -> float:
        return step_decay(self.learning_rate, step, self.lr_steps, self.lr_gamma)


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    per_class: bool = True


# ──────────────────────────────────────────────────────────────
# Train log
# ──────────────────────────────────────────────────────────────

LOG_COLUMNS = ["step", "lr", "total", "qfl", "qfl_pos", "dfl", "giou", "num_pos",
               "clamped", "grad_norm", "wall"]


class TrainLog:
    """Per-step loss records. ``qfl_pos`` is the LQE loss curve.

    Wall-clock is kept in memory only; CSV exports leave it out so that two
    runs with the same seed write identical files.
    """

    def __init__(self, records: Optional[list[dict]] = None):
        self.records: list[dict] = list(records or [])

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise InvalidInputError(
                f"train log steps must increase: {record['step']} after {self.records[-1]['step']}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=LOG_COLUMNS)

    def losses(self) -> pd.DataFrame:
        """Deterministic columns only."""
        return self.frame.drop(columns=["wall"])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.losses().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainLog":
        df = pd.read_csv(path, float_precision="round_trip")
        records = df.to_dict(orient="records")
        for r in records:
            r.setdefault("wall", float("nan"))
        return cls(records)


# ──────────────────────────────────────────────────────────────
# One step
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    locations: np.ndarray
    assignment: Assignment
    scene_ids: np.ndarray

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene]) -> "Batch":
        if not scenes:
            raise InvalidInputError("a batch needs at least one scene")
        return cls(
            features=np.concatenate([s.features for s in scenes]),
            locations=np.concatenate([s.locations for s in scenes]),
            assignment=Assignment(
                labels=np.concatenate([s.labels for s in scenes]),
                gt_boxes=np.concatenate([s.assigned_boxes for s in scenes]),
            ),
            scene_ids=np.concatenate([np.full(s.num_locations, s.scene_index) for s in scenes]),
        )


def loss_and_grads(state: dict[str, np.ndarray], variant: HeadVariant, grid, batch: Batch,
                   weights: LossWeights = LossWeights(), qfl_cfg: QflConfig = QflConfig(),
                   iou_targets: Optional[np.ndarray] = None) -> tuple[LossResult, dict, HeadOutput]:
    """Forward, loss and parameter gradients for one batch (no update)."""
    out = forward(state, variant, grid, batch.features, batch.locations)
    result = total_loss(out.prediction, batch.assignment, weights, qfl_cfg,
                        detach_stats=variant.detach_stats, iou_targets=iou_targets)
    grads = backward(state, variant, out, result.grads)
    return result, grads, out


def step(state: dict[str, np.ndarray], batch: Batch, variant: HeadVariant, config: TrainConfig,
         grid, optimizer, lr: Optional[float] = None) -> tuple[dict[str, np.ndarray], dict]:
    """One optimizer update of ``state`` (in place). Returns (state, metrics).

    Metrics describe the loss before the update.
    """
    lr = config.learning_rate if lr is None else lr
    result, grads, _ = loss_and_grads(state, variant, grid, batch, config.weights, config.qfl)
    metrics = {
        "total": result.total, "qfl": result.qfl, "qfl_pos": result.qfl_pos,
        "dfl": result.dfl, "giou": result.giou, "num_pos": result.num_pos,
        "clamped": result.clamped, "lr": lr,
    }
    if not np.isfinite(result.total):
        metrics["grad_norm"] = float("nan")
        return state, metrics
    grads, norm = clip_by_global_norm(grads, config.grad_clip or None)
    metrics["grad_norm"] = norm
    if np.isfinite(norm):
        optimizer.step(state, grads, lr)
    return state, metrics


# ──────────────────────────────────────────────────────────────
# Training loop
# ──────────────────────────────────────────────────────────────

def train(config: TrainConfig, source: BaseSceneSource, variant: HeadVariant,
          init: Optional[Checkpoint] = None) -> tuple[Checkpoint, TrainLog]:
    """Train ``variant`` for ``config.steps`` updates on scenes from ``source``.

    Raises:
        TrainingDivergedError: on a non-finite loss or gradient; carries the
            last parameters that produced a finite loss and the log so far.
    """
    ckpt = init.copy() if init is not None else fresh_checkpoint(
        variant, source.config, config.grid_n, config.seed)
    if init is not None:
        ckpt.check_compatible(source.config)
    state = ckpt.state
    optimizer = build_optimizer(config.optimizer, config.momentum, config.weight_decay)
    log = TrainLog()
    previous = copy_state(state)
    t0 = time.time()

    logger.info(f"Training {variant.kind.value} for {config.steps} steps "
                f"(batch {config.batch_scenes} scenes, lr {config.learning_rate}, seed {config.seed})")
    for i in range(config.steps):
        indices = range(i * config.batch_scenes, (i + 1) * config.batch_scenes)
        batch = Batch.from_scenes(source.batch(indices))
        before = copy_state(state)
        _, metrics = step(state, batch, variant, config, ckpt.grid, optimizer, config.lr_at(i))
        metrics["step"] = i
        metrics["wall"] = time.time() - t0

        if not np.isfinite(metrics["total"]) or not np.isfinite(metrics["grad_norm"]):
            # a non-finite loss means the last update broke the parameters
            good = previous if not np.isfinite(metrics["total"]) else before
            last_good = Checkpoint(variant, ckpt.grid, ckpt.scene_config, good, max(i - 1, 0))
            logger.error(f"Training diverged at step {i}: total={metrics['total']}, "
                         f"grad_norm={metrics['grad_norm']}")
            raise TrainingDivergedError(f"non-finite loss or gradient at step {i}",
                                        last_good=last_good, log=log, step=i)
        log.append({c: metrics[c] for c in LOG_COLUMNS})
        previous = before

        if config.log_every and (i % config.log_every == 0 or i == config.steps - 1):
            logger.info(f"step {i:5d}  total {metrics['total']:.4f}  qfl {metrics['qfl']:.4f}  "
                        f"qfl_pos {metrics['qfl_pos']:.4f}  dfl {metrics['dfl']:.4f}  "
                        f"giou {metrics['giou']:.4f}  pos {metrics['num_pos']}")

    ckpt.step += config.steps
    logger.info(f"Training finished in {time.time() - t0:.1f}s")
    return ckpt, log


# ──────────────────────────────────────────────────────────────
# Evaluation
# ──────────────────────────────────────────────────────────────

CANDIDATE_DTYPES = {
    "scene": "int64", "location": "int64", "x": "float64", "y": "float64",
    "positive": "bool", "gt_index": "int64", "gt_label": "int64",
    "label": "int64", "score": "float64", "joint_at_gt": "float64",
    "quality": "float64", "quality_estimate": "float64", "real_iou": "float64",
    "top1_mean": "float64", "x1": "float64", "y1": "float64", "x2": "float64", "y2": "float64",
}
DETECTION_DTYPES = {
    "scene": "int64", "location": "int64", "label": "int64", "score": "float64",
    "real_iou": "float64", "x1": "float64", "y1": "float64", "x2": "float64", "y2": "float64",
}
EVAL_SCHEMA = "lqelab.eval_report"
EVAL_VERSION = 1


def _typed(records, dtypes: dict) -> pd.DataFrame:
    df = pd.DataFrame(records, columns=list(dtypes))
    return df.astype(dtypes)


@dataclass(eq=False)
class EvalReport:
    """Per-candidate records (every location of every scene) and post-NMS detections.

    ``quality`` is the DGQP estimate I (NaN for variants without one);
    ``quality_estimate`` is what the PCC report correlates with real IoU:
    I for gflv2_decomposed, the joint score at the gt class otherwise.
    """

    variant: str
    candidates: pd.DataFrame
    detections: pd.DataFrame
    num_scenes: int = 0

    @property
    def positives(self) -> pd.DataFrame:
        return self.candidates[self.candidates["positive"]]

    def to_dict(self) -> dict:
        return {
            "schema": EVAL_SCHEMA,
            "version": EVAL_VERSION,
            "variant": self.variant,
            "num_scenes": self.num_scenes,
            "candidates": {c: self.candidates[c].tolist() for c in self.candidates.columns},
            "detections": {c: self.detections[c].tolist() for c in self.detections.columns},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        if doc.get("schema") != EVAL_SCHEMA or doc.get("version") != EVAL_VERSION:
            raise InvalidInputError("not an lqelab eval report document")
        return cls(
            variant=doc["variant"],
            candidates=_typed(doc["candidates"], CANDIDATE_DTYPES),
            detections=_typed(doc["detections"], DETECTION_DTYPES),
            num_scenes=int(doc.get("num_scenes", 0)),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _scene_records(ckpt: Checkpoint, scene: Scene, nms_cfg: NmsConfig) -> tuple[dict, dict]:
    out = forward(ckpt.state, ckpt.variant, ckpt.grid, scene.features, scene.locations)
    pred = out.prediction
    joint = pred.joint
    n_loc, m = joint.shape
    labels = np.argmax(joint, axis=1)
    scores = joint.max(axis=1)

    pos = scene.positive
    gt_index = scene.assignment
    real_iou = np.zeros(n_loc)
    gt_label = np.full(n_loc, -1, dtype=np.int64)
    if scene.num_objects:
        overlaps = iou_matrix(pred.boxes, scene.gt_boxes)
        real_iou = overlaps.max(axis=1)
        if pos.any():
            real_iou[pos] = iou_aligned(pred.boxes[pos], scene.gt_boxes[gt_index[pos]])
            gt_label[pos] = scene.gt_labels[gt_index[pos]]
    joint_at_gt = np.where(gt_label >= 0, joint[np.arange(n_loc), np.maximum(gt_label, 0)], scores)
    if ckpt.variant.kind is VariantKind.GFLV2_DECOMPOSED:
        quality = pred.quality
        estimate = quality
    else:
        quality = np.full(n_loc, np.nan)
        estimate = joint_at_gt

    candidates = {
        "scene": np.full(n_loc, scene.scene_index), "location": np.arange(n_loc),
        "x": scene.locations[:, 0], "y": scene.locations[:, 1], "positive": pos,
        "gt_index": gt_index, "gt_label": gt_label, "label": labels, "score": scores,
        "joint_at_gt": joint_at_gt, "quality": quality, "quality_estimate": estimate,
        "real_iou": real_iou, "top1_mean": pred.probs.max(axis=-1).mean(axis=-1),
        "x1": pred.boxes[:, 0], "y1": pred.boxes[:, 1], "x2": pred.boxes[:, 2], "y2": pred.boxes[:, 3],
    }
    kept = nms_indices(pred.boxes, scores, labels if nms_cfg.per_class else None,
                       nms_cfg.iou_threshold, nms_cfg.score_threshold)
    detections = {
        "scene": np.full(kept.size, scene.scene_index), "location": kept, "label": labels[kept],
        "score": scores[kept], "real_iou": real_iou[kept],
        "x1": pred.boxes[kept, 0], "y1": pred.boxes[kept, 1],
        "x2": pred.boxes[kept, 2], "y2": pred.boxes[kept, 3],
    }
    return candidates, detections


def evaluate(ckpt: Checkpoint, scenes: Sequence[Scene], nms_cfg: NmsConfig = NmsConfig()) -> EvalReport:
    """Inference over ``scenes``; deterministic for a given checkpoint."""
    cand_parts, det_parts = [], []
    for scene in scenes:
        ckpt.check_compatible(scene.config)
        if scene.num_locations == 0:
            continue
        cands, dets = _scene_records(ckpt, scene, nms_cfg)
        cand_parts.append(_typed(cands, CANDIDATE_DTYPES))
        det_parts.append(_typed(dets, DETECTION_DTYPES))
    candidates = (pd.concat(cand_parts, ignore_index=True) if cand_parts
                  else _typed([], CANDIDATE_DTYPES))
    detections = (pd.concat(det_parts, ignore_index=True) if det_parts
                  else _typed([], DETECTION_DTYPES))
    logger.info(f"Evaluated {len(scenes)} scenes: {len(candidates)} candidates, "
                f"{int(candidates['positive'].sum())} positives, {len(detections)} detections")
    return EvalReport(ckpt.variant.kind.value, candidates, detections, len(scenes))
