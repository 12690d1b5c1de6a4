"""Tests for the finite-difference gradient suites."""

import time

import numpy as np
import pytest

from src.training.gradcheck import (
    MICRO_CLASSES, MICRO_FEATURES, MICRO_GRID, SABOTAGE_ENV, SUITES, check_head_gradients,
    micro_batch, micro_variant, numeric_gradient, relative_error, run_gradcheck,
)
from src.training.head import HeadVariant, VariantKind, init_state
from src.utils.errors import InvalidArgumentError


class TestPrimitives:
    """Test the numeric helpers."""

    def test_relative_error_zero_for_equal(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_relative_error_scale_free(self):
        a = np.array([1.0, 0.0])
        assert relative_error(a * 1e3, a * 1.01e3) == pytest.approx(relative_error(a, a * 1.01))

    def test_numeric_gradient_of_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        grad = numeric_gradient(lambda: float((x ** 2).sum()), x, np.arange(3))
        np.testing.assert_allclose(grad, 2 * x, rtol=1e-8)
        np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])


class TestSuites:
    """Test the suite runner."""

    def test_default_run_passes(self, monkeypatch):
        monkeypatch.delenv(SABOTAGE_ENV, raising=False)
        t0 = time.time()
        report = run_gradcheck(seed=0, trials=100)
        assert report.passed, report.summary()
        assert {r.name for r in report.results} == set(SUITES)
        for r in report.results:
            assert r.checked == r.trials, r
        assert time.time() - t0 < 60

    def test_sabotage_fails(self):
        report = run_gradcheck(seed=1, trials=5, sabotage=True, suites=["dgqp", "head_gflv2_decomposed"])
        assert report.sabotaged
        assert not report.passed
        assert all(r.failures > 0 for r in report.results)

    def test_sabotage_from_environment(self, monkeypatch):
        monkeypatch.setenv(SABOTAGE_ENV, "1")
        report = run_gradcheck(seed=2, trials=3, suites=["giou"])
        assert report.sabotaged and not report.passed

    def test_zero_trials_vacuous_pass(self):
        report = run_gradcheck(trials=0, sabotage=False)
        assert report.passed
        assert all(r.vacuous for r in report.results)

    def test_unknown_suite(self):
        with pytest.raises(InvalidArgumentError):
            run_gradcheck(trials=1, suites=["nope"])

    def test_negative_trials(self):
        with pytest.raises(InvalidArgumentError):
            run_gradcheck(trials=-1)

    def test_same_seed_same_report(self):
        a = run_gradcheck(seed=4, trials=5, sabotage=False, suites=["topkm", "dfl"]).frame()
        b = run_gradcheck(seed=4, trials=5, sabotage=False, suites=["topkm", "dfl"]).frame()
        assert a.equals(b)

    @pytest.mark.parametrize("suite", ["dgqp", "qfl", "giou"])
    def test_tied_instances_are_redrawn(self, suite):
        report = run_gradcheck(seed=7, trials=40, sabotage=False, suites=[suite])
        (result,) = report.results
        assert result.checked == 40
        assert result.passed


class TestHeadGradients:
    """Test the end-to-end head check directly."""

    @pytest.mark.parametrize("kind", list(VariantKind))
    def test_micro_instances(self, kind):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(200):
            variant = micro_variant(kind, rng)
            state = init_state(variant, MICRO_FEATURES, MICRO_CLASSES, MICRO_GRID, rng)
            err = check_head_gradients(state, variant, MICRO_GRID, micro_batch(rng), rng)
            if err is None:
                continue
            assert err < 1e-4
            checked += 1
            if checked == 50:
                break
        assert checked == 50

    def test_detached_statistics_rejected(self, rng):
        variant = HeadVariant(kind=VariantKind.GFLV2_DECOMPOSED, k=2, p=3, backbone_width=5,
                              detach_stats=True)
        state = init_state(variant, MICRO_FEATURES, MICRO_CLASSES, MICRO_GRID, rng)
        with pytest.raises(InvalidArgumentError):
            check_head_gradients(state, variant, MICRO_GRID, micro_batch(rng), rng)
