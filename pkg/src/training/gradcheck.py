"""
Finite-difference gradient suites
=================================
Central differences (step 1e-5) against every analytic gradient in the
package, on seeded random instances:

    softmax_expectation   softmax + expectation w.r.t. logits
    topkm                 statistic routing for every StatLayout
    dgqp                  DGQP parameters and input feature
    qfl                   logit and probability forms
    dfl                   w.r.t. distribution logits
    giou                  w.r.t. predicted corners
    head_<variant>        loss -> J -> {C, DGQP, distributions} -> backbone

Per instance the relative error ||a - n|| / max(||a||, ||n||, 1e-8) is taken
over a random sample of coordinates. Instances whose top-k order or ReLU
pattern would flip inside the step are redrawn and counted as skipped.

Setting LQELAB_SABOTAGE_GRADIENT (or ``sabotage=True``) scales every analytic
gradient by 1.01, which must make the suites fail.
"""

import os
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from src.detection.distribution import (
    BinGrid, StatLayout, expectation_array, expectation_backward, min_topk_gap, softmax, softmax_backward,
    stat_backward, stat_forward,
)
from src.detection.geometry import giou_aligned
from src.detection.losses import (
    Assignment, LossWeights, QflConfig, distribution_focal_loss, quality_focal_loss, total_loss,
)
from src.detection.quality_head import dgqp_backward, dgqp_forward, init_dgqp
from src.training.head import HeadVariant, VariantKind, backward, forward, init_state
from src.training.trainer import Batch
from src.utils.errors import InvalidArgumentError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "gradcheck.log")

FD_STEP = 1e-5
REL_TOLERANCE = 1e-4
# must stay well above FD_STEP
TIE_MARGIN = 1e-4
# predicted box edges move by up to ~1e-4 per step
BOX_TIE_MARGIN = 1e-3
SABOTAGE_ENV = "LQELAB_SABOTAGE_GRADIENT"
SABOTAGE_FACTOR = 1.01
COORDS_PER_TENSOR = 6
MAX_REDRAWS = 50

MICRO_GRID = BinGrid(0.0, 8.0, 4)
MICRO_FEATURES = 6
MICRO_CLASSES = 2
MICRO_LOCATIONS = 6


@dataclass
class SuiteResult:
    name: str
    trials: int
    checked: int
    skipped: int
    failures: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    @property
    def vacuous(self) -> bool:
        return self.checked == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class GradcheckReport:
    seed: int
    trials: int
    sabotaged: bool
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.results])

    def summary(self) -> str:
        lines = [f"{r.name:<24} {'PASS' if r.passed else 'FAIL'}  checked={r.checked:<4} "
                 f"skipped={r.skipped:<3} max_rel_err={r.max_rel_error:.2e}" for r in self.results]
        overall = "PASS" if self.passed else "FAIL"
        if self.results and all(r.vacuous for r in self.results):
            overall += " (vacuous: nothing checked)"
        lines.append(f"overall: {overall}")
        return "\n".join(lines)


# ──────────────────────────────────────────────────────────────
# Primitives
# ──────────────────────────────────────────────────────────────

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def sample_coords(rng: np.random.Generator, size: int, count: int = COORDS_PER_TENSOR) -> np.ndarray:
    return rng.choice(size, size=min(size, count), replace=False)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, coords: np.ndarray,
                     step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` at flat ``coords`` of ``x`` (perturbed in place, then restored)."""
    flat = x.reshape(-1)
    out = np.zeros(coords.size)
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + step
        plus = f()
        flat[c] = old - step
        minus = f()
        flat[c] = old
        out[j] = (plus - minus) / (2.0 * step)
    return out


def sabotage_requested() -> bool:
    return os.getenv(SABOTAGE_ENV, "").strip().lower() not in ("", "0", "false", "no")


class _Suite:
    """Trial bookkeeping for one suite."""

    def __init__(self, name: str, trials: int, factor: float):
        self.name = name
        self.trials = trials
        self.factor = factor
        self.checked = 0
        self.skipped = 0
        self.failures = 0
        self.max_err = 0.0

    def compare(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> None:
        """pairs of (analytic at sampled coords, numeric at the same coords)."""
        a = np.concatenate([np.ravel(p[0]) for p in pairs]) * self.factor
        n = np.concatenate([np.ravel(p[1]) for p in pairs])
        err = relative_error(a, n)
        self.checked += 1
        self.max_err = max(self.max_err, err)
        if err >= REL_TOLERANCE:
            self.failures += 1

    def result(self) -> SuiteResult:
        return SuiteResult(self.name, self.trials, self.checked, self.skipped,
                           self.failures, self.max_err)


def _random_layout(rng: np.random.Generator, size: int) -> StatLayout:
    k = int(rng.integers(1, size))
    choice = int(rng.integers(0, 4))
    return [StatLayout(k, True, False, False), StatLayout(k, False, True, False),
            StatLayout(k, True, True, False), StatLayout(k, True, True, True)][choice]


# ──────────────────────────────────────────────────────────────
# Suites
# ──────────────────────────────────────────────────────────────

def _suite_softmax_expectation(suite: _Suite, rng: np.random.Generator) -> None:
    grid = MICRO_GRID
    for _ in range(suite.trials):
        z = rng.normal(0.0, 1.5, size=grid.size)
        w = rng.normal(size=grid.size)
        c = rng.normal()

        def f():
            p = softmax(z)
            return float(w @ p + c * expectation_array(p, grid.centers))

        p = softmax(z)
        analytic = softmax_backward(p, w + expectation_backward(np.asarray(c), grid.centers))
        coords = sample_coords(rng, z.size)
        suite.compare([(analytic[coords], numeric_gradient(f, z, coords))])


def _suite_topkm(suite: _Suite, rng: np.random.Generator) -> None:
    size = 17
    for _ in range(suite.trials):
        for _ in range(MAX_REDRAWS):
            z = rng.normal(0.0, 1.5, size=(4, size))
            layout = _random_layout(rng, size)
            if min_topk_gap(softmax(z), layout.k) >= TIE_MARGIN:
                break
            suite.skipped += 1
        else:
            continue
        u = rng.normal(size=(4, layout.width))

        def f():
            blocks, _ = stat_forward(softmax(z), layout)
            return float((u * blocks).sum())

        p = softmax(z)
        _, idx = stat_forward(p, layout)
        analytic = softmax_backward(p, stat_backward(p, idx, u, layout))
        coords = sample_coords(rng, z.size, 2 * COORDS_PER_TENSOR)
        suite.compare([(analytic.ravel()[coords], numeric_gradient(f, z, coords))])


def _suite_dgqp(suite: _Suite, rng: np.random.Generator) -> None:
    for _ in range(suite.trials):
        for _ in range(MAX_REDRAWS):
            layout = _random_layout(rng, 17)
            hidden_bias, output_bias = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
            params = init_dgqp(layout, int(rng.integers(1, 9)), rng, hidden_bias, output_bias)
            feature = rng.uniform(0.0, 1.0, size=(3, layout.feature_dim))
            _, cache = dgqp_forward(params, feature)
            if np.abs(cache.hidden_pre).min() >= TIE_MARGIN:
                break
            suite.skipped += 1
        else:
            continue
        u = rng.normal(size=3)
        grads = dgqp_backward(params, cache, u)

        def f():
            q, _ = dgqp_forward(params, feature)
            return float(u @ q)

        pairs = []
        for arr, g in ((params.w1, grads.w1), (params.w2, grads.w2), (feature, grads.feature)):
            coords = sample_coords(rng, arr.size)
            pairs.append((g.ravel()[coords], numeric_gradient(f, arr, coords)))
        if hidden_bias:
            coords = sample_coords(rng, params.b1.size)
            pairs.append((grads.b1[coords], numeric_gradient(f, params.b1, coords)))
        suite.compare(pairs)


def _suite_qfl(suite: _Suite, rng: np.random.Generator) -> None:
    for t in range(suite.trials):
        beta = float(rng.uniform(1.5, 3.0))
        from_logits = bool(t % 2 == 0)
        for _ in range(MAX_REDRAWS):
            y = rng.uniform(0.0, 1.0, size=4)
            y[rng.random(4) < 0.3] = 0.0
            x = rng.normal(0.0, 2.0, size=4) if from_logits else rng.uniform(0.05, 0.95, size=4)
            j = 1.0 / (1.0 + np.exp(-x)) if from_logits else x
            if np.abs(j - y).min() >= TIE_MARGIN:
                break
            suite.skipped += 1
        else:
            continue
        _, grad = quality_focal_loss(x, y, beta, from_logits)

        def f():
            loss, _ = quality_focal_loss(x, y, beta, from_logits)
            return float(loss.sum())

        coords = np.arange(x.size)
        suite.compare([(grad, numeric_gradient(f, x, coords))])


def _suite_dfl(suite: _Suite, rng: np.random.Generator) -> None:
    grid = MICRO_GRID
    for _ in range(suite.trials):
        logits = rng.normal(0.0, 1.5, size=(3, grid.size))
        targets = rng.uniform(grid.y0, grid.yn, size=3)
        res = distribution_focal_loss(logits, targets, grid)

        def f():
            return float(distribution_focal_loss(logits, targets, grid).loss.sum())

        coords = sample_coords(rng, logits.size, 2 * COORDS_PER_TENSOR)
        suite.compare([(res.grad.ravel()[coords], numeric_gradient(f, logits, coords))])


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    xy = rng.uniform(0.0, 10.0, size=(count, 2))
    wh = rng.uniform(1.0, 6.0, size=(count, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _suite_giou(suite: _Suite, rng: np.random.Generator) -> None:
    for _ in range(suite.trials):
        for _ in range(MAX_REDRAWS):
            pred = _random_boxes(rng, 3)
            gt = _random_boxes(rng, 3)
            xs_p, xs_g = pred[:, [0, 2]], gt[:, [0, 2]]
            ys_p, ys_g = pred[:, [1, 3]], gt[:, [1, 3]]
            gap = min(np.abs(xs_p[:, :, None] - xs_g[:, None, :]).min(),
                      np.abs(ys_p[:, :, None] - ys_g[:, None, :]).min())
            if gap >= TIE_MARGIN:
                break
            suite.skipped += 1
        else:
            continue
        _, d_pred = giou_aligned(pred, gt)

        def f():
            g, _ = giou_aligned(pred, gt)
            return float(g.sum())

        coords = np.arange(pred.size)
        suite.compare([(d_pred.ravel(), numeric_gradient(f, pred, coords))])


def micro_batch(rng: np.random.Generator, grid: BinGrid = MICRO_GRID,
                num_locations: int = MICRO_LOCATIONS, feature_dim: int = MICRO_FEATURES,
                num_classes: int = MICRO_CLASSES) -> Batch:
    """Random locations and features with at least one positive; gt boxes keep
    every side offset of a positive strictly inside the grid."""
    locations = rng.uniform(10.0, 20.0, size=(num_locations, 2))
    features = rng.normal(size=(num_locations, feature_dim))
    labels = rng.integers(-1, num_classes, size=num_locations)
    labels[0] = max(labels[0], 0)
    offsets = rng.uniform(grid.y0 + 0.5, grid.yn - 0.5, size=(num_locations, 4))
    gt = np.stack([locations[:, 0] - offsets[:, 0], locations[:, 1] - offsets[:, 2],
                   locations[:, 0] + offsets[:, 1], locations[:, 1] + offsets[:, 3]], axis=1)
    gt[labels < 0] = 0.0
    return Batch(features, locations, Assignment(labels, gt), np.zeros(num_locations, dtype=np.int64))


def micro_variant(kind: VariantKind, rng: np.random.Generator) -> HeadVariant:
    return HeadVariant(kind=kind, k=2, p=3, composed_dim=3, backbone_width=5,
                       include_variance=bool(rng.integers(0, 2)),
                       hidden_bias=bool(rng.integers(0, 2)), output_bias=bool(rng.integers(0, 2)))


def _near_box_kink(boxes: np.ndarray, assignment: Assignment) -> bool:
    """A predicted edge sits next to a gt edge, where GIoU switches branch."""
    pos = assignment.positive
    if not pos.any():
        return False
    p, g = boxes[pos], assignment.gt_boxes[pos]
    for axis in (slice(0, None, 2), slice(1, None, 2)):
        if np.abs(p[:, axis, None] - g[:, None, axis]).min() < BOX_TIE_MARGIN:
            return True
    return False


def check_head_gradients(state: dict[str, np.ndarray], variant: HeadVariant, grid: BinGrid,
                         batch: Batch, rng: np.random.Generator,
                         weights: LossWeights = LossWeights(), qfl_cfg: QflConfig = QflConfig(),
                         factor: float = 1.0) -> Optional[float]:
    """Relative error of the full-head gradient on one batch, or None when
    the instance sits too close to a top-k or ReLU switch."""
    if variant.detach_stats:
        raise InvalidArgumentError("detached statistics do not produce the exact gradient")
    out = forward(state, variant, grid, batch.features, batch.locations)
    pred = out.prediction
    if np.abs(out.cache.hidden_pre).min() < TIE_MARGIN:
        return None
    if variant.uses_stats and min_topk_gap(pred.probs, variant.k) < TIE_MARGIN:
        return None
    if pred.dgqp_cache is not None and np.abs(pred.dgqp_cache.hidden_pre).min() < TIE_MARGIN:
        return None
    if _near_box_kink(pred.boxes, batch.assignment):
        return None
    result = total_loss(pred, batch.assignment, weights, qfl_cfg, iou_targets=None)
    grads = backward(state, variant, out, result.grads)
    targets = result.iou_targets

    def f():
        o = forward(state, variant, grid, batch.features, batch.locations)
        return total_loss(o.prediction, batch.assignment, weights, qfl_cfg,
                          iou_targets=targets).total

    analytic, numeric = [], []
    for name, arr in state.items():
        coords = sample_coords(rng, arr.size)
        analytic.append(grads[name].ravel()[coords] * factor)
        numeric.append(numeric_gradient(f, arr, coords))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _suite_head(suite: _Suite, rng: np.random.Generator, kind: VariantKind) -> None:
    for _ in range(suite.trials):
        err = None
        for _ in range(MAX_REDRAWS):
            variant = micro_variant(kind, rng)
            state = init_state(variant, MICRO_FEATURES, MICRO_CLASSES, MICRO_GRID, rng)
            for v in state.values():
                v += rng.normal(0.0, 0.3, size=v.shape)
            err = check_head_gradients(state, variant, MICRO_GRID, micro_batch(rng), rng,
                                       factor=suite.factor)
            if err is not None:
                break
            suite.skipped += 1
        if err is None:
            continue
        suite.checked += 1
        suite.max_err = max(suite.max_err, err)
        if err >= REL_TOLERANCE:
            suite.failures += 1


SUITES: dict[str, Callable[[_Suite, np.random.Generator], None]] = {
    "softmax_expectation": _suite_softmax_expectation,
    "topkm": _suite_topkm,
    "dgqp": _suite_dgqp,
    "qfl": _suite_qfl,
    "dfl": _suite_dfl,
    "giou": _suite_giou,
    "head_gflv1_style": lambda s, r: _suite_head(s, r, VariantKind.GFLV1_STYLE),
    "head_gflv2_decomposed": lambda s, r: _suite_head(s, r, VariantKind.GFLV2_DECOMPOSED),
    "head_gflv2_composed": lambda s, r: _suite_head(s, r, VariantKind.GFLV2_COMPOSED),
}


def run_gradcheck(seed: int = 0, trials: int = 100, sabotage: Optional[bool] = None,
                  suites: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Run the selected suites (all by default) with ``trials`` instances each."""
    if trials < 0:
        raise InvalidArgumentError(f"trials must be >= 0, got {trials}")
    names = list(suites) if suites else list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise InvalidArgumentError(f"unknown gradient suites: {unknown}")
    sabotaged = sabotage_requested() if sabotage is None else bool(sabotage)
    if sabotaged:
        logger.warning(f"Analytic gradients scaled by {SABOTAGE_FACTOR} (sabotage enabled)")
    if trials == 0:
        logger.warning("Gradient check run with 0 trials; the result is vacuous")

    results = []
    for i, name in enumerate(names):
        suite = _Suite(name, trials, SABOTAGE_FACTOR if sabotaged else 1.0)
        SUITES[name](suite, np.random.default_rng([seed, i]))
        res = suite.result()
        log = logger.info if res.passed else logger.error
        log(f"gradcheck {name}: {'PASS' if res.passed else 'FAIL'} "
            f"({res.checked} checked, {res.skipped} skipped, max rel err {res.max_rel_error:.2e})")
        results.append(res)
    return GradcheckReport(seed, trials, sabotaged, results)
