"""
General Distribution of a box edge
==================================
Each of the four box sides is represented by a discrete probability vector
over n+1 evenly spaced offset bins. The regressed edge is the expectation of
that vector; Topkm statistics of the four vectors form the feature F that the
quality predictor consumes.

Array helpers (``softmax``, ``expectation_array``, ``stat_forward``,
``stat_backward``) operate on the trailing bin axis and are what the trainer
uses. The typed wrappers (``normalize``, ``expectation``, ``topkm``,
``assemble_stat_feature``, ``backprop_topkm``) work on single distributions.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from src.utils.errors import InvalidArgumentError, InvalidInputError

SIDES = ("l", "r", "t", "b")


@dataclass(frozen=True)
class BinGrid:
    """Evenly spaced bin centers y_i = y0 + i * delta, i = 0..n."""

    y0: float
    yn: float
    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidArgumentError(f"n must be a positive integer, got {self.n!r}")
        if not (np.isfinite(self.y0) and np.isfinite(self.yn)) or self.yn <= self.y0:
            raise InvalidArgumentError(f"grid needs yn > y0, got y0={self.y0}, yn={self.yn}")

    @property
    def delta(self) -> float:
        return (self.yn - self.y0) / self.n

    @property
    def size(self) -> int:
        return self.n + 1

    @property
    def centers(self) -> np.ndarray:
        return self.y0 + np.arange(self.n + 1, dtype=np.float64) * self.delta

    @classmethod
    def covering(cls, max_offset: float, n: int = 16, y0: float = 0.0) -> "BinGrid":
        """Grid from y0 to the largest offset the scenes can produce."""
        return cls(y0=float(y0), yn=float(max_offset), n=int(n))

    def to_dict(self) -> dict:
        return {"y0": self.y0, "yn": self.yn, "n": int(self.n)}


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GeneralDistribution:
    grid: BinGrid
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.shape != (self.grid.size,):
            raise InvalidInputError(
                f"expected {self.grid.size} probabilities, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
            raise InvalidInputError("probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"probabilities sum to {probs.sum():.12f}, not 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def one_hot(cls, grid: BinGrid, index: int) -> "GeneralDistribution":
        probs = np.zeros(grid.size)
        probs[index] = 1.0
        return cls(grid, probs)

    @classmethod
    def uniform(cls, grid: BinGrid) -> "GeneralDistribution":
        return cls(grid, np.full(grid.size, 1.0 / grid.size))


@dataclass(frozen=True, eq=False)
class DistributionLogits:
    grid: BinGrid
    logits: np.ndarray

    def __post_init__(self):
        logits = _frozen(self.logits)
        if logits.shape != (self.grid.size,):
            raise InvalidInputError(
                f"expected {self.grid.size} logits, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be finite")
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True)
class StatLayout:
    """Which per-side statistics enter the feature F.

    The default (Top-k values followed by their mean) is the Topkm feature;
    the other combinations exist for the statistic ablation.
    """

    k: int = 4
    use_topk: bool = True
    use_mean: bool = True
    use_variance: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError(f"k must be >= 1, got {self.k}")
        if not (self.use_topk or self.use_mean or self.use_variance):
            raise InvalidArgumentError("stat layout selects no statistic")

    @property
    def width(self) -> int:
        """Per-side block length."""
        return self.k * int(self.use_topk) + int(self.use_mean) + int(self.use_variance)

    @property
    def feature_dim(self) -> int:
        return 4 * self.width

    @property
    def name(self) -> str:
        parts = []
        if self.use_topk:
            parts.append(f"top{self.k}")
        if self.use_mean:
            parts.append("mean")
        if self.use_variance:
            parts.append("var")
        return "+".join(parts)

    def to_dict(self) -> dict:
        return {"k": self.k, "use_topk": self.use_topk, "use_mean": self.use_mean,
                "use_variance": self.use_variance}


@dataclass(frozen=True, eq=False)
class StatFeature:
    k: int
    values: np.ndarray
    include_variance: bool = False
    layout: Optional[StatLayout] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.layout is None:
            object.__setattr__(self, "layout", StatLayout(k=self.k, use_variance=self.include_variance))
        if self.values.shape != (self.layout.feature_dim,):
            raise InvalidInputError(
                f"stat feature of length {self.values.shape} does not match layout "
                f"{self.layout.name} ({self.layout.feature_dim})")

    def side_block(self, side: str) -> np.ndarray:
        i = SIDES.index(side)
        w = self.layout.width
        return self.values[i * w:(i + 1) * w]


# ──────────────────────────────────────────────────────────────
# Array operations
# ──────────────────────────────────────────────────────────────

def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the trailing axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax output."""
    return probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))


def expectation_array(probs: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return probs @ centers


def expectation_backward(d_value: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. probabilities of sum_i P_i y_i."""
    return d_value[..., None] * centers


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, largest first; ties go to the lowest bin."""
    size = probs.shape[-1]
    if not 1 <= k <= size:
        raise InvalidArgumentError(f"k must lie in [1, {size}], got {k}")
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def stat_forward(probs: np.ndarray, layout: StatLayout) -> tuple[np.ndarray, np.ndarray]:
    """Per-side statistic blocks.

    probs: (..., n+1). Returns (blocks (..., width), top-k indices (..., k)).
    """
    idx = topk_indices(probs, layout.k)
    top = np.take_along_axis(probs, idx, axis=-1)
    mean = top.mean(axis=-1, keepdims=True)
    parts = []
    if layout.use_topk:
        parts.append(top)
    if layout.use_mean:
        parts.append(mean)
    if layout.use_variance:
        parts.append(((top - mean) ** 2).mean(axis=-1, keepdims=True))
    return np.concatenate(parts, axis=-1), idx


def stat_backward(probs: np.ndarray, idx: np.ndarray, d_blocks: np.ndarray,
                  layout: StatLayout) -> np.ndarray:
    """Route block gradients back to the selected bins; unselected bins get 0."""
    k = layout.k
    top = np.take_along_axis(probs, idx, axis=-1)
    d_top = np.zeros_like(top)
    col = 0
    if layout.use_topk:
        d_top += d_blocks[..., col:col + k]
        col += k
    if layout.use_mean:
        d_top += d_blocks[..., col:col + 1] / k
        col += 1
    if layout.use_variance:
        mean = top.mean(axis=-1, keepdims=True)
        d_top += d_blocks[..., col:col + 1] * 2.0 * (top - mean) / k
    d_probs = np.zeros_like(probs)
    np.put_along_axis(d_probs, idx, d_top, axis=-1)
    return d_probs


def min_topk_gap(probs: np.ndarray, k: int) -> float:
    """Smallest gap between consecutive order statistics up to rank k+1.

    Used to skip gradient checks near order switches.
    """
    ordered = -np.sort(-probs, axis=-1)
    upto = min(k + 1, probs.shape[-1])
    gaps = ordered[..., :upto - 1] - ordered[..., 1:upto]
    return float(gaps.min()) if gaps.size else np.inf


def shift_distribution(dist: "GeneralDistribution", shift: int) -> "GeneralDistribution":
    """Move the probability mass ``shift`` bins along the axis (cyclically)."""
    return GeneralDistribution(dist.grid, np.roll(dist.probs, shift))


# ──────────────────────────────────────────────────────────────
# Typed operations
# ──────────────────────────────────────────────────────────────

def normalize(logits: DistributionLogits) -> GeneralDistribution:
    probs = softmax(np.asarray(logits.logits))
    return GeneralDistribution(logits.grid, probs)


def expectation(dist: GeneralDistribution) -> float:
    value = float(expectation_array(dist.probs, dist.grid.centers))
    return min(max(value, dist.grid.y0), dist.grid.yn)


def topkm(dist: GeneralDistribution, k: int, include_variance: bool = False) -> np.ndarray:
    """k largest probabilities (non-increasing), their mean, optional variance."""
    if not 1 <= k <= dist.grid.size:
        raise InvalidArgumentError(f"k must lie in [1, {dist.grid.size}], got {k}")
    layout = StatLayout(k=k, use_variance=include_variance)
    block, _ = stat_forward(dist.probs, layout)
    return block


def assemble_stat_feature(dists: Sequence[GeneralDistribution], k: int,
                          include_variance: bool = False,
                          layout: Optional[StatLayout] = None) -> StatFeature:
    """Concat of the per-side blocks in l, r, t, b order."""
    if len(dists) != 4:
        raise InvalidInputError(f"need four side distributions, got {len(dists)}")
    grid = dists[0].grid
    if any(d.grid != grid for d in dists[1:]):
        raise InvalidInputError("side distributions do not share a grid")
    layout = layout or StatLayout(k=k, use_variance=include_variance)
    if layout.k > grid.size:
        raise InvalidArgumentError(f"k must lie in [1, {grid.size}], got {layout.k}")
    probs = np.stack([d.probs for d in dists])
    blocks, _ = stat_forward(probs, layout)
    return StatFeature(k=layout.k, values=blocks.reshape(-1),
                       include_variance=layout.use_variance, layout=layout)


def backprop_topkm(dist: GeneralDistribution, k: int, upstream: np.ndarray,
                   include_variance: bool = False) -> np.ndarray:
    """Gradient of a Topkm block w.r.t. the probabilities of ``dist``."""
    layout = StatLayout(k=k, use_variance=include_variance)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (layout.width,):
        raise InvalidInputError(
            f"upstream gradient must have length {layout.width}, got {upstream.shape}")
    idx = topk_indices(dist.probs, k)
    return stat_backward(np.asarray(dist.probs), idx, upstream, layout)
