"""
Quality head
============
Distribution-Guided Quality Predictor (two FC layers, ReLU then Sigmoid,
mapping the statistic feature F to a scalar IoU estimate I) and the
Classification-IoU joint score J.

Two joint forms are available:

    decomposed   J = C x I       (C from the classification branch)
    composed     J = sigmoid(FC([class_feature, W_e F + b_e]))

The decomposed form is the one used by training, evaluation and NMS; the
composed form exists for the comparison experiment.

All forward functions are batched over a leading axis and return a cache that
the matching backward consumes.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from src.detection.distribution import StatFeature, StatLayout
from src.utils.errors import InvalidInputError, StaleCacheError

DEFAULT_HIDDEN = 64


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ──────────────────────────────────────────────────────────────
# DGQP
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DgqpParams:
    """W1 (p x D), b1 (p), W2 (1 x p), b2 scalar; D = 4 x layout.width."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    layout: StatLayout = field(default_factory=StatLayout)
    hidden_bias: bool = True
    output_bias: bool = True

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64).reshape(1, -1)
        p = w1.shape[0]
        if w1.shape != (p, self.layout.feature_dim) or b1.shape != (p,) or w2.shape != (1, p):
            raise InvalidInputError(
                f"inconsistent DGQP shapes w1={w1.shape} b1={b1.shape} w2={w2.shape} "
                f"for layout {self.layout.name} (D={self.layout.feature_dim})")
        if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(b1))
                and np.all(np.isfinite(w2)) and np.isfinite(self.b2)):
            raise InvalidInputError("DGQP parameters must be finite")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))

    @property
    def k(self) -> int:
        return self.layout.k

    @property
    def p(self) -> int:
        return self.w1.shape[0]

    @property
    def num_parameters(self) -> int:
        count = self.w1.size + self.w2.size
        if self.hidden_bias:
            count += self.b1.size
        if self.output_bias:
            count += 1
        return int(count)


@dataclass(frozen=True, eq=False)
class DgqpCache:
    params: DgqpParams
    feature: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    quality: np.ndarray


@dataclass(frozen=True, eq=False)
class DgqpGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    feature: np.ndarray


def init_dgqp(layout: StatLayout, p: int = DEFAULT_HIDDEN,
              rng: Optional[np.random.Generator] = None,
              hidden_bias: bool = True, output_bias: bool = True) -> DgqpParams:
    """Uniform(+-1/sqrt(fan_in)) weights; b2 = 0 so the initial I is near 0.5."""
    rng = rng or np.random.default_rng(0)
    d = layout.feature_dim
    bound1 = 1.0 / np.sqrt(d)
    bound2 = 1.0 / np.sqrt(p)
    w1 = rng.uniform(-bound1, bound1, size=(p, d))
    b1 = rng.uniform(-bound1, bound1, size=p) if hidden_bias else np.zeros(p)
    w2 = rng.uniform(-bound2, bound2, size=(1, p))
    return DgqpParams(w1, b1, w2, 0.0, layout, hidden_bias, output_bias)


def _feature_matrix(params: DgqpParams, feature: Union[StatFeature, np.ndarray]) -> np.ndarray:
    values = feature.values if isinstance(feature, StatFeature) else np.asarray(feature, dtype=np.float64)
    values = np.atleast_2d(values)
    if values.ndim != 2 or values.shape[1] != params.layout.feature_dim:
        raise InvalidInputError(
            f"feature length {values.shape[-1]} does not match DGQP input "
            f"{params.layout.feature_dim}")
    return values


def dgqp_forward(params: DgqpParams, feature: Union[StatFeature, np.ndarray]):
    """I = sigmoid(W2 relu(W1 F + b1) + b2).

    A single StatFeature (or 1-D array) gives a float; a (N, D) matrix gives
    an (N,) array. The cache is batched either way.
    """
    single = isinstance(feature, StatFeature) or np.ndim(feature) == 1
    f = _feature_matrix(params, feature)
    hidden_pre = f @ params.w1.T
    if params.hidden_bias:
        hidden_pre = hidden_pre + params.b1
    hidden = np.maximum(hidden_pre, 0.0)
    z = hidden @ params.w2[0]
    if params.output_bias:
        z = z + params.b2
    quality = sigmoid(z)
    cache = DgqpCache(params, f, hidden_pre, hidden, quality)
    return (float(quality[0]) if single else quality), cache


def dgqp_backward(params: DgqpParams, cache: DgqpCache, d_quality) -> DgqpGrads:
    """Exact chain rule through sigmoid, W2, ReLU (subgradient 0 at 0) and W1."""
    if cache.params is not params:
        raise StaleCacheError("DGQP cache was produced by a different parameter set")
    d_q = np.broadcast_to(np.asarray(d_quality, dtype=np.float64), cache.quality.shape)
    dz = d_q * cache.quality * (1.0 - cache.quality)
    d_w2 = (dz @ cache.hidden)[None, :]
    d_b2 = float(dz.sum()) if params.output_bias else 0.0
    d_hidden = dz[:, None] * params.w2[0][None, :]
    d_pre = np.where(cache.hidden_pre > 0, d_hidden, 0.0)
    d_w1 = d_pre.T @ cache.feature
    d_b1 = d_pre.sum(axis=0) if params.hidden_bias else np.zeros_like(params.b1)
    d_feature = d_pre @ params.w1
    return DgqpGrads(d_w1, d_b1, d_w2, d_b2, d_feature)


# ──────────────────────────────────────────────────────────────
# Joint representation
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class JointScore:
    c: np.ndarray
    i: float
    j: np.ndarray


def join_decomposed(c, i: float) -> JointScore:
    c = np.array(c, dtype=np.float64, copy=True).reshape(-1)
    if c.size == 0 or not np.all((c >= 0.0) & (c <= 1.0)):
        raise InvalidInputError("classification scores must lie in [0, 1]")
    if not 0.0 <= i <= 1.0:
        raise InvalidInputError(f"IoU estimate must lie in [0, 1], got {i}")
    return JointScore(c=c, i=float(i), j=c * i)


def argmax_class(score: Union[JointScore, np.ndarray]) -> int:
    """Index of the largest joint score; ties go to the lowest index."""
    j = score.j if isinstance(score, JointScore) else np.asarray(score)
    if j.size < 1:
        raise InvalidInputError("joint score is empty")
    return int(np.argmax(j))


# ──────────────────────────────────────────────────────────────
# Composed form (comparison baseline)
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ComposedHeadParams:
    """e = W_e F + b_e (d); logits = W_o [class_feature, e] + b_o (m)."""

    w_embed: np.ndarray
    b_embed: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    layout: StatLayout = field(default_factory=StatLayout)

    def __post_init__(self):
        d, dim_f = np.shape(self.w_embed)
        m = np.shape(self.w_out)[0]
        if dim_f != self.layout.feature_dim or np.shape(self.b_embed) != (d,):
            raise InvalidInputError(f"embedding shapes {np.shape(self.w_embed)} do not match "
                                    f"stat feature length {self.layout.feature_dim}")
        if np.shape(self.w_out)[1] <= d or np.shape(self.b_out) != (m,):
            raise InvalidInputError(f"output shapes {np.shape(self.w_out)} / "
                                    f"{np.shape(self.b_out)} inconsistent with d={d}")

    @property
    def d(self) -> int:
        return self.w_embed.shape[0]

    @property
    def class_dim(self) -> int:
        return self.w_out.shape[1] - self.d

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[0]


@dataclass(frozen=True, eq=False)
class ComposedCache:
    params: ComposedHeadParams
    class_feature: np.ndarray
    stat: np.ndarray
    joined: np.ndarray


@dataclass(frozen=True, eq=False)
class ComposedGrads:
    w_embed: np.ndarray
    b_embed: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    class_feature: np.ndarray
    stat: np.ndarray


def init_composed(layout: StatLayout, class_dim: int, num_classes: int, d: int = 64,
                  rng: Optional[np.random.Generator] = None) -> ComposedHeadParams:
    rng = rng or np.random.default_rng(0)
    be = 1.0 / np.sqrt(layout.feature_dim)
    bo = 1.0 / np.sqrt(class_dim + d)
    return ComposedHeadParams(
        w_embed=rng.uniform(-be, be, size=(d, layout.feature_dim)),
        b_embed=np.zeros(d),
        w_out=rng.uniform(-bo, bo, size=(num_classes, class_dim + d)),
        b_out=np.zeros(num_classes),
        layout=layout,
    )


def composed_forward(params: ComposedHeadParams, class_feature, stat_feature):
    """Joint logits (N, m); the sigmoid is applied by the loss."""
    cls = np.atleast_2d(np.asarray(class_feature, dtype=np.float64))
    stat = stat_feature.values if isinstance(stat_feature, StatFeature) else stat_feature
    stat = np.atleast_2d(np.asarray(stat, dtype=np.float64))
    if cls.shape[1] != params.class_dim or stat.shape[1] != params.layout.feature_dim \
            or cls.shape[0] != stat.shape[0]:
        raise InvalidInputError(
            f"composed head expects class feature {params.class_dim} and stat feature "
            f"{params.layout.feature_dim}, got {cls.shape} and {stat.shape}")
    embedded = stat @ params.w_embed.T + params.b_embed
    joined = np.concatenate([cls, embedded], axis=1)
    logits = joined @ params.w_out.T + params.b_out
    return logits, ComposedCache(params, cls, stat, joined)


def composed_backward(params: ComposedHeadParams, cache: ComposedCache,
                      d_logits: np.ndarray) -> ComposedGrads:
    if cache.params is not params:
        raise StaleCacheError("composed-head cache was produced by a different parameter set")
    d_joined = d_logits @ params.w_out
    d_cls = d_joined[:, :params.class_dim]
    d_emb = d_joined[:, params.class_dim:]
    return ComposedGrads(
        w_embed=d_emb.T @ cache.stat,
        b_embed=d_emb.sum(axis=0),
        w_out=d_logits.T @ cache.joined,
        b_out=d_logits.sum(axis=0),
        class_feature=d_cls,
        stat=d_emb @ params.w_embed,
    )
