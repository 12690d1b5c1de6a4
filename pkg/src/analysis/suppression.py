"""
Mistaken-suppression study
==========================
How often does NMS keep a near-best box for each object when candidates are
ranked by a (corrupted) quality estimate?

For every object, its candidates are the positive locations assigned to it.
Each corruption level adds N(0, sigma^2) noise to the estimate and clamps to
[0, 1]; candidates are shuffled with the study RNG (so clamped ties break at
random) and run through greedy NMS keyed by object. An object counts as
retained when its top surviving box has real IoU within ``tolerance`` of the
best candidate's.

The random-ranking baseline is the brute-force probability that a uniformly
random candidate is within tolerance of the best, averaged over objects.
"""

from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.detection.geometry import DEFAULT_IOU_THRESHOLD, nms_indices
from src.scenes.synthgen import Scene
from src.training.checkpoint import Checkpoint
from src.training.trainer import EvalReport, NmsConfig, evaluate
from src.utils.errors import InvalidArgumentError, InvalidInputError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "suppression.log")

DEFAULT_LEVELS = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
RETENTION_TOLERANCE = 0.02


def _object_groups(report: EvalReport) -> list[pd.DataFrame]:
    pos = report.positives
    return [g for _, g in pos.groupby(["scene", "gt_index"], sort=True)]


def random_ranking_baseline(report: EvalReport, tolerance: float = RETENTION_TOLERANCE) -> float:
    groups = _object_groups(report)
    if not groups:
        raise InvalidInputError("eval report has no positive candidates")
    rates = []
    for g in groups:
        iou = g["real_iou"].to_numpy()
        rates.append(float(np.mean(iou >= iou.max() - tolerance)))
    return float(np.mean(rates))


def suppression_study(report: EvalReport, levels: Sequence[float] = DEFAULT_LEVELS, seed: int = 0,
                      oracle: bool = False, iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                      tolerance: float = RETENTION_TOLERANCE) -> pd.DataFrame:
    """Retention rate per corruption level.

    ``oracle`` replaces the learned estimate with the real IoU.
    Returns a frame with columns corruption, retention, objects.
    """
    levels = [float(s) for s in levels]
    if any(s < 0 or not np.isfinite(s) for s in levels):
        raise InvalidArgumentError(f"corruption levels must be finite and >= 0: {levels}")
    scenes = [g for _, g in report.positives.groupby("scene", sort=True)]
    if not scenes:
        raise InvalidInputError("eval report has no positive candidates")

    rows = []
    for li, sigma in enumerate(levels):
        rng = np.random.default_rng([seed, li])
        retained = 0
        objects = 0
        for g in scenes:
            boxes = g[["x1", "y1", "x2", "y2"]].to_numpy()
            real = g["real_iou"].to_numpy()
            owner = g["gt_index"].to_numpy()
            base = real if oracle else g["quality_estimate"].to_numpy()
            scores = np.clip(base + sigma * rng.standard_normal(base.size), 0.0, 1.0) if sigma else base
            perm = rng.permutation(base.size)
            kept = perm[nms_indices(boxes[perm], scores[perm], owner[perm], iou_threshold, 0.0)]

            best = {o: real[owner == o].max() for o in np.unique(owner)}
            top_survivor: dict = {}
            for idx in kept:
                top_survivor.setdefault(owner[idx], idx)
            for o, best_iou in best.items():
                objects += 1
                if real[top_survivor[o]] >= best_iou - tolerance:
                    retained += 1
        rows.append({"corruption": sigma, "retention": retained / objects, "objects": objects})
    table = pd.DataFrame(rows, columns=["corruption", "retention", "objects"])
    logger.debug(f"suppression study ({'oracle' if oracle else report.variant}):\n{table}")
    return table


def run_suppression_study(ckpt: Checkpoint, scenes: Sequence[Scene],
                          levels: Sequence[float] = DEFAULT_LEVELS, seed: int = 0,
                          oracle: bool = False, nms_cfg: Optional[NmsConfig] = None,
                          tolerance: float = RETENTION_TOLERANCE) -> pd.DataFrame:
    """Evaluate ``ckpt`` on ``scenes`` and run the study on the result."""
    nms_cfg = nms_cfg or NmsConfig()
    report = evaluate(ckpt, scenes, nms_cfg)
    return suppression_study(report, levels, seed, oracle, nms_cfg.iou_threshold, tolerance)
