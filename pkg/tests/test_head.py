"""Tests for the dense head variants."""

import numpy as np
import pytest

from src.detection.distribution import BinGrid
from src.training.head import (
    PRIOR_PROB, HeadVariant, VariantKind, backward, forward, init_state, num_parameters,
)
from src.utils.errors import InvalidArgumentError, InvalidInputError

GRID = BinGrid(0.0, 16.0, 16)


def make_state(kind, **kwargs):
    variant = HeadVariant(kind=kind, **kwargs)
    return variant, init_state(variant, feature_dim=12, num_classes=3, grid=GRID,
                               rng=np.random.default_rng(0))


class TestHeadVariant:
    """Test variant flags."""

    @pytest.mark.parametrize("alias,kind", [
        ("gflv1", VariantKind.GFLV1_STYLE),
        ("gflv2", VariantKind.GFLV2_DECOMPOSED),
        ("composed", VariantKind.GFLV2_COMPOSED),
        ("gflv2_composed", VariantKind.GFLV2_COMPOSED),
    ])
    def test_string_kinds(self, alias, kind):
        assert HeadVariant(kind=alias).kind is kind

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            HeadVariant(kind="centerness")

    def test_empty_statistic_selection(self):
        with pytest.raises(InvalidArgumentError):
            HeadVariant(use_topk=False, use_mean=False)

    def test_to_dict_round_trip(self):
        variant = HeadVariant(kind="composed", k=3, composed_dim=16)
        assert HeadVariant(**variant.to_dict()) == variant


class TestState:
    """Test parameter layout per variant."""

    def test_dgqp_adds_1409_parameters(self):
        _, v1 = make_state(VariantKind.GFLV1_STYLE)
        _, v2 = make_state(VariantKind.GFLV2_DECOMPOSED)
        assert num_parameters(v2) - num_parameters(v1) == 1409
        assert num_parameters(v2, "dgqp.") == 1409

    def test_bias_flags_drop_arrays(self):
        _, state = make_state(VariantKind.GFLV2_DECOMPOSED, hidden_bias=False, output_bias=False)
        assert "dgqp.b1" not in state and "dgqp.b2" not in state
        assert num_parameters(state, "dgqp.") == 1344

    def test_composed_has_no_classification_branch(self):
        _, state = make_state(VariantKind.GFLV2_COMPOSED)
        assert "cls.w" not in state
        assert state["composed.w_embed"].shape == (64, 20)

    def test_prior_bias(self):
        _, state = make_state(VariantKind.GFLV1_STYLE)
        np.testing.assert_allclose(1 / (1 + np.exp(-state["cls.b"])), PRIOR_PROB)


class TestForward:
    """Test forward outputs and gradient keys."""

    @pytest.mark.parametrize("kind", list(VariantKind))
    def test_shapes_and_ranges(self, kind, rng):
        variant, state = make_state(kind)
        x, locs = rng.normal(size=(7, 12)), rng.uniform(0, 32, size=(7, 2))
        pred = forward(state, variant, GRID, x, locs).prediction
        assert pred.joint.shape == (7, 3)
        assert np.all((pred.joint >= 0) & (pred.joint <= 1))
        np.testing.assert_allclose(pred.probs.sum(axis=-1), 1.0)
        assert np.all(pred.boxes[:, 2] >= pred.boxes[:, 0])
        assert (pred.quality is not None) == (kind is VariantKind.GFLV2_DECOMPOSED)

    @pytest.mark.parametrize("kind", list(VariantKind))
    def test_backward_covers_state(self, kind, rng):
        from src.detection.losses import Assignment, total_loss
        variant, state = make_state(kind)
        x, locs = rng.normal(size=(4, 12)), np.full((4, 2), 16.0)
        out = forward(state, variant, GRID, x, locs)
        assign = Assignment(np.array([0, -1, 2, -1]), np.tile([10.0, 10.0, 20.0, 20.0], (4, 1)))
        grads = backward(state, variant, out, total_loss(out.prediction, assign).grads)
        assert set(grads) == set(state)
        for name in state:
            assert grads[name].shape == state[name].shape

    def test_feature_width_checked(self, rng):
        variant, state = make_state(VariantKind.GFLV1_STYLE)
        with pytest.raises(InvalidInputError):
            forward(state, variant, GRID, rng.normal(size=(3, 5)), np.zeros((3, 2)))
