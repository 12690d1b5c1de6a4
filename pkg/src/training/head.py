"""
Dense head
==========
The toy detector trained on synthetic scenes: a one-hidden-layer MLP
backbone shared by a classification branch and a distribution branch, plus
the LQE path selected by the variant.

    h      = relu(W_b x + b_b)                          (N, H)
    cls    = W_c h + b_c                                (N, m)
    reg    = (W_r h + b_r).reshape(N, 4, n+1)           -> P = softmax(reg)
    boxes  = decode(location, sum_i P_i y_i)

    gflv1_style        J = sigmoid(cls)
    gflv2_decomposed   J = sigmoid(cls) x DGQP(Topkm(P))
    gflv2_composed     J = sigmoid(W_o [h, W_e Topkm(P) + b_e] + b_o)

Parameters live in a flat ``dict[str, np.ndarray]`` (the "state") keyed
``<block>.<name>``; the optimizer and checkpoint code only ever see that
mapping.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from src.detection.distribution import BinGrid, StatLayout, expectation_array, softmax, stat_forward
from src.detection.geometry import decode_array
from src.detection.losses import LossGrads, Prediction
from src.detection.quality_head import (
    DEFAULT_HIDDEN, ComposedHeadParams, DgqpParams, composed_forward, dgqp_forward, init_composed,
    init_dgqp,
)
from src.utils.errors import InvalidArgumentError, InvalidInputError

BACKBONE_WIDTH = 64
# Initial foreground probability of the classification branch
PRIOR_PROB = 0.01


class VariantKind(str, Enum):
    GFLV1_STYLE = "gflv1_style"
    GFLV2_DECOMPOSED = "gflv2_decomposed"
    GFLV2_COMPOSED = "gflv2_composed"


# CLI spellings
VARIANT_ALIASES = {
    "gflv1": VariantKind.GFLV1_STYLE,
    "gflv2": VariantKind.GFLV2_DECOMPOSED,
    "composed": VariantKind.GFLV2_COMPOSED,
}


@dataclass(frozen=True)
class HeadVariant:
    kind: VariantKind = VariantKind.GFLV2_DECOMPOSED
    detach_stats: bool = False
    k: int = 4
    p: int = DEFAULT_HIDDEN
    include_variance: bool = False
    use_topk: bool = True
    use_mean: bool = True
    hidden_bias: bool = True
    output_bias: bool = True
    composed_dim: int = 64
    backbone_width: int = BACKBONE_WIDTH

    def __post_init__(self):
        kind = self.kind
        if isinstance(kind, str) and not isinstance(kind, VariantKind):
            try:
                kind = VARIANT_ALIASES.get(kind) or VariantKind(kind)
            except ValueError as exc:
                raise InvalidArgumentError(f"unknown head variant '{self.kind}'") from exc
        object.__setattr__(self, "kind", kind)
        if self.p < 1 or self.composed_dim < 1 or self.backbone_width < 1:
            raise InvalidArgumentError("p, composed_dim and backbone_width must be >= 1")
        # validates k and the statistic selection
        self.layout

    @property
    def layout(self) -> StatLayout:
        return StatLayout(k=self.k, use_topk=self.use_topk, use_mean=self.use_mean,
                          use_variance=self.include_variance)

    @property
    def uses_stats(self) -> bool:
        return self.kind is not VariantKind.GFLV1_STYLE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True, eq=False)
class HeadCache:
    features: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray


@dataclass(frozen=True, eq=False)
class HeadOutput:
    prediction: Prediction
    cache: HeadCache


# ──────────────────────────────────────────────────────────────
# Parameters
# ──────────────────────────────────────────────────────────────

def init_state(variant: HeadVariant, feature_dim: int, num_classes: int, grid: BinGrid,
               rng: Optional[np.random.Generator] = None) -> dict[str, np.ndarray]:
    """Fresh parameters; uniform(+-1/sqrt(fan_in)) weights, zero biases except the
    class-logit biases, which start at the foreground prior."""
    rng = rng or np.random.default_rng(0)
    width = variant.backbone_width
    bias_prior = -np.log((1.0 - PRIOR_PROB) / PRIOR_PROB)

    def uniform(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    state = {
        "backbone.w": uniform(width, feature_dim),
        "backbone.b": np.zeros(width),
        "reg.w": uniform(4 * grid.size, width),
        "reg.b": np.zeros(4 * grid.size),
    }
    if variant.kind is not VariantKind.GFLV2_COMPOSED:
        state["cls.w"] = uniform(num_classes, width)
        state["cls.b"] = np.full(num_classes, bias_prior)
    if variant.kind is VariantKind.GFLV2_DECOMPOSED:
        dgqp = init_dgqp(variant.layout, variant.p, rng, variant.hidden_bias, variant.output_bias)
        state["dgqp.w1"] = dgqp.w1
        if variant.hidden_bias:
            state["dgqp.b1"] = dgqp.b1
        state["dgqp.w2"] = dgqp.w2
        if variant.output_bias:
            state["dgqp.b2"] = np.array([dgqp.b2])
    if variant.kind is VariantKind.GFLV2_COMPOSED:
        comp = init_composed(variant.layout, width, num_classes, variant.composed_dim, rng)
        state["composed.w_embed"] = comp.w_embed
        state["composed.b_embed"] = comp.b_embed
        state["composed.w_out"] = comp.w_out
        state["composed.b_out"] = np.full(num_classes, bias_prior)
    return state


def num_parameters(state: dict[str, np.ndarray], prefix: str = "") -> int:
    return int(sum(v.size for k, v in state.items() if k.startswith(prefix)))


def copy_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state.items()}


def dgqp_params(state: dict[str, np.ndarray], variant: HeadVariant) -> DgqpParams:
    w1 = state["dgqp.w1"]
    b1 = state["dgqp.b1"] if variant.hidden_bias else np.zeros(w1.shape[0])
    b2 = float(state["dgqp.b2"][0]) if variant.output_bias else 0.0
    return DgqpParams(w1, b1, state["dgqp.w2"], b2, variant.layout,
                      variant.hidden_bias, variant.output_bias)


def composed_params(state: dict[str, np.ndarray], variant: HeadVariant) -> ComposedHeadParams:
    return ComposedHeadParams(state["composed.w_embed"], state["composed.b_embed"],
                              state["composed.w_out"], state["composed.b_out"], variant.layout)


# ──────────────────────────────────────────────────────────────
# Forward / backward
# ──────────────────────────────────────────────────────────────

def forward(state: dict[str, np.ndarray], variant: HeadVariant, grid: BinGrid,
            features: np.ndarray, locations: np.ndarray) -> HeadOutput:
    x = np.asarray(features, dtype=np.float64)
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    if x.ndim != 2 or x.shape[1] != state["backbone.w"].shape[1] or x.shape[0] != locations.shape[0]:
        raise InvalidInputError(
            f"features {x.shape} / locations {locations.shape} do not match backbone input "
            f"{state['backbone.w'].shape[1]}")
    n_loc = x.shape[0]
    hidden_pre = x @ state["backbone.w"].T + state["backbone.b"]
    hidden = np.maximum(hidden_pre, 0.0)

    reg_logits = (hidden @ state["reg.w"].T + state["reg.b"]).reshape(n_loc, 4, grid.size)
    probs = softmax(reg_logits)
    boxes = decode_array(locations, expectation_array(probs, grid.centers))
    fields = dict(grid=grid, locations=locations, reg_logits=reg_logits, probs=probs, boxes=boxes)

    if variant.kind is VariantKind.GFLV1_STYLE:
        cls_logits = hidden @ state["cls.w"].T + state["cls.b"]
        pred = Prediction(cls_logits=cls_logits, **fields)
    else:
        layout = variant.layout
        blocks, idx = stat_forward(probs, layout)
        stat = blocks.reshape(n_loc, layout.feature_dim)
        extra = dict(layout=layout, stat=stat, stat_index=idx)
        if variant.kind is VariantKind.GFLV2_DECOMPOSED:
            cls_logits = hidden @ state["cls.w"].T + state["cls.b"]
            quality, dcache = dgqp_forward(dgqp_params(state, variant), stat)
            pred = Prediction(cls_logits=cls_logits, quality=np.asarray(quality).reshape(n_loc),
                              dgqp_cache=dcache, **fields, **extra)
        else:
            logits, ccache = composed_forward(composed_params(state, variant), hidden, stat)
            pred = Prediction(cls_logits=logits, composed_cache=ccache, **fields, **extra)
    return HeadOutput(pred, HeadCache(x, hidden_pre, hidden))


def backward(state: dict[str, np.ndarray], variant: HeadVariant, out: HeadOutput,
             grads: LossGrads) -> dict[str, np.ndarray]:
    """Parameter gradients for every key of ``state``."""
    cache = out.cache
    h = cache.hidden
    n_loc = h.shape[0]
    g: dict[str, np.ndarray] = {}
    d_hidden = np.zeros_like(h)

    if variant.kind is VariantKind.GFLV2_COMPOSED:
        cg = grads.composed
        g["composed.w_embed"] = cg.w_embed
        g["composed.b_embed"] = cg.b_embed
        g["composed.w_out"] = cg.w_out
        g["composed.b_out"] = cg.b_out
        d_hidden += cg.class_feature
    else:
        d_cls = grads.cls_logits
        g["cls.w"] = d_cls.T @ h
        g["cls.b"] = d_cls.sum(axis=0)
        d_hidden += d_cls @ state["cls.w"]

    if variant.kind is VariantKind.GFLV2_DECOMPOSED:
        dg = grads.dgqp
        g["dgqp.w1"] = dg.w1
        if variant.hidden_bias:
            g["dgqp.b1"] = dg.b1
        g["dgqp.w2"] = dg.w2
        if variant.output_bias:
            g["dgqp.b2"] = np.array([dg.b2])

    d_reg = grads.reg_logits.reshape(n_loc, -1)
    g["reg.w"] = d_reg.T @ h
    g["reg.b"] = d_reg.sum(axis=0)
    d_hidden += d_reg @ state["reg.w"]

    d_pre = np.where(cache.hidden_pre > 0, d_hidden, 0.0)
    g["backbone.w"] = d_pre.T @ cache.features
    g["backbone.b"] = d_pre.sum(axis=0)
    return g
