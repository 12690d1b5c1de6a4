"""Tests for correlation, scatter, suppression and loss-curve reports."""

import numpy as np
import pandas as pd
import pytest

from src.analysis.correlation import (
    PccReport, ScatterExport, dgqp_io_scatter, pcc, pcc_report, sharpness_scatter, top1_mean,
)
from src.analysis.curves import loss_curve_compare, read_curves
from src.analysis.suppression import random_ranking_baseline, run_suppression_study, suppression_study
from src.detection.distribution import BinGrid, GeneralDistribution
from src.training.trainer import (
    CANDIDATE_DTYPES, DETECTION_DTYPES, LOG_COLUMNS, EvalReport, NmsConfig, TrainLog, evaluate,
)
from src.utils.errors import InvalidArgumentError, InvalidInputError, UndefinedCorrelationError


def make_report(real_ious, estimates=None, variant="gflv2_decomposed", quality=None):
    """One object per scene; every candidate of an object predicts the same box."""
    rows = []
    for scene, ious in enumerate(real_ious):
        est = ious if estimates is None else estimates[scene]
        for loc, (iou, q) in enumerate(zip(ious, est)):
            rows.append({
                "scene": scene, "location": loc, "x": 8.0, "y": 8.0, "positive": True,
                "gt_index": 0, "gt_label": 0, "label": 0, "score": q, "joint_at_gt": q,
                "quality": q if quality is None else quality, "quality_estimate": q,
                "real_iou": iou, "top1_mean": 0.5, "x1": 0.0, "y1": 0.0, "x2": 16.0, "y2": 16.0,
            })
    candidates = pd.DataFrame(rows, columns=list(CANDIDATE_DTYPES)).astype(CANDIDATE_DTYPES)
    detections = pd.DataFrame([], columns=list(DETECTION_DTYPES)).astype(DETECTION_DTYPES)
    return EvalReport(variant, candidates, detections, len(real_ious))


def make_log(values, offset=0.0):
    log = TrainLog()
    for step, v in enumerate(values):
        rec = {c: v + offset for c in LOG_COLUMNS}
        rec.update(step=step, num_pos=1, clamped=0, lr=0.1, wall=0.0)
        log.append(rec)
    return log


class TestPcc:
    """Test the Pearson coefficient."""

    def test_affine_is_one(self):
        x = np.arange(10.0)
        assert pcc(x, 2 * x + 1) == pytest.approx(1.0)

    def test_negated_is_minus_one(self):
        x = np.arange(10.0)
        assert pcc(x, -x) == pytest.approx(-1.0)

    def test_known_value(self):
        assert pcc([1, 2, 3, 4], [1, 3, 2, 5]) == pytest.approx(0.8315, abs=1e-4)

    def test_constant_series(self):
        with pytest.raises(UndefinedCorrelationError):
            pcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_too_few_samples(self):
        with pytest.raises(UndefinedCorrelationError):
            pcc([1.0, 2.0], [1.0, 2.0])

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            pcc([1.0, 2.0, 3.0], [1.0, 2.0])


class TestPccReport:
    """Test PCC over eval report positives."""

    def test_perfect_estimate(self):
        report = make_report([[0.9, 0.5, 0.3], [0.8, 0.2]])
        result = pcc_report(report, seeds=[0])
        assert result.pcc == pytest.approx(1.0)
        assert result.samples == 5
        assert result.to_dict()["seeds"] == [0]

    def test_pools_reports(self):
        a = make_report([[0.9, 0.5]])
        b = make_report([[0.3, 0.1]])
        assert pcc_report([a, b]).samples == 4

    def test_mixed_variants(self):
        with pytest.raises(InvalidInputError):
            pcc_report([make_report([[0.9, 0.5, 0.2]]), make_report([[0.9, 0.5, 0.2]], variant="gflv1_style")])

    def test_report_range(self):
        with pytest.raises(InvalidInputError):
            PccReport("gflv1_style", 1.5, 10)


class TestScatter:
    """Test Top-1 sharpness and scatter exports."""

    def test_top1_one_hot(self):
        grid = BinGrid(0.0, 16.0, 16)
        assert top1_mean([GeneralDistribution.one_hot(grid, i) for i in (0, 3, 7, 16)]) == 1.0

    def test_top1_uniform(self):
        grid = BinGrid(0.0, 16.0, 16)
        assert top1_mean([GeneralDistribution.uniform(grid)] * 4) == pytest.approx(1 / 17)

    def test_top1_array(self):
        probs = np.full((3, 4, 5), 0.2)
        np.testing.assert_allclose(top1_mean(probs), [0.2, 0.2, 0.2])

    def test_sharpness_csv(self, tmp_path):
        scatter = sharpness_scatter(make_report([[0.9, 0.5, 0.3]]))
        path = scatter.to_csv(tmp_path / "scatter_sharpness.csv")
        back = ScatterExport.from_csv(path)
        assert list(back.frame.columns) == ["top1_mean", "real_iou"]
        assert len(back) == 3

    def test_dgqp_scatter_needs_quality(self):
        report = make_report([[0.9, 0.5, 0.3]], variant="gflv1_style", quality=float("nan"))
        with pytest.raises(InvalidInputError):
            dgqp_io_scatter(report)

    def test_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            ScatterExport("a", "b", pd.DataFrame({"a": [0.5, 1.2], "b": [0.1, 0.2]}))


class TestSuppression:
    """Test the mistaken-suppression study."""

    def test_oracle_retains_everything(self):
        report = make_report([[0.3, 0.9, 0.5], [0.7, 0.2]], estimates=[[0.9, 0.1, 0.5], [0.1, 0.9]])
        table = suppression_study(report, levels=(0.0,), oracle=True)
        assert table["retention"].tolist() == [1.0]
        assert table["objects"].tolist() == [2]

    def test_inverted_estimate_loses_everything(self):
        report = make_report([[0.9, 0.5, 0.3]], estimates=[[0.1, 0.5, 0.9]])
        assert suppression_study(report, levels=(0.0,))["retention"].iloc[0] == 0.0

    def test_tolerance(self):
        report = make_report([[0.9, 0.89, 0.3]], estimates=[[0.1, 0.9, 0.2]])
        assert suppression_study(report, levels=(0.0,))["retention"].iloc[0] == 1.0
        assert suppression_study(report, levels=(0.0,), tolerance=0.0)["retention"].iloc[0] == 0.0

    def test_random_baseline(self):
        report = make_report([[0.9, 0.89, 0.5, 0.3], [0.6, 0.1]])
        assert random_ranking_baseline(report) == pytest.approx((0.5 + 0.5) / 2)

    def test_heavy_corruption_approaches_random(self):
        rng = np.random.default_rng(0)
        ious = [list(rng.uniform(0.1, 0.95, size=5)) for _ in range(400)]
        report = make_report(ious)
        table = suppression_study(report, levels=(0.0, 100.0), seed=3)
        assert table["retention"].iloc[0] == 1.0
        assert table["retention"].iloc[1] == pytest.approx(random_ranking_baseline(report), abs=0.12)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        report = make_report([list(rng.uniform(0, 1, size=4)) for _ in range(30)])
        a = suppression_study(report, levels=(0.1, 0.5), seed=9)
        b = suppression_study(report, levels=(0.1, 0.5), seed=9)
        pd.testing.assert_frame_equal(a, b)

    def test_negative_level(self):
        with pytest.raises(InvalidArgumentError):
            suppression_study(make_report([[0.5, 0.4]]), levels=(-0.1,))

    def test_no_positives(self):
        with pytest.raises(InvalidInputError):
            suppression_study(make_report([]), levels=(0.0,))

    def test_from_checkpoint(self, trained_small, small_source):
        ckpt, _ = trained_small
        scenes = small_source.batch(range(100, 104))
        table = run_suppression_study(ckpt, scenes, levels=(0.0, 0.4), seed=1)
        expected = suppression_study(evaluate(ckpt, scenes, NmsConfig()), levels=(0.0, 0.4), seed=1)
        pd.testing.assert_frame_equal(table, expected)
        assert table["objects"].iloc[0] == sum(len(s.gt_boxes) for s in scenes)
        oracle = run_suppression_study(ckpt, scenes, levels=(0.0,), oracle=True)
        assert oracle["retention"].iloc[0] == 1.0


class TestLossCurves:
    """Test matched-seed loss-curve comparison."""

    def test_identical_logs(self):
        log = make_log([3.0, 2.0, 1.5, 1.2])
        cmp = loss_curve_compare(log, make_log([3.0, 2.0, 1.5, 1.2]))
        assert cmp.final_gap == 0.0 and cmp.auc_gap == 0.0

    def test_shifted_log(self):
        values = [3.0, 2.0, 1.5, 1.2]
        cmp = loss_curve_compare(make_log(values), make_log(values, offset=-0.25))
        assert cmp.final_gap == pytest.approx(-0.25)
        assert cmp.auc_gap == pytest.approx(-0.25 * 3)

    def test_csv_columns(self, tmp_path):
        cmp = loss_curve_compare(make_log([1.0, 0.5]), make_log([1.0, 0.4]), names=("ref", "cand"))
        frame = read_curves(cmp.to_csv(tmp_path / "losscurves.csv"))
        assert "ref.qfl_pos" in frame.columns and "cand.qfl_pos" in frame.columns
        assert cmp.summary()["steps"] == 2

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            loss_curve_compare(make_log([1.0, 0.5]), make_log([1.0]))

    def test_unknown_column(self):
        with pytest.raises(InvalidInputError):
            loss_curve_compare(make_log([1.0]), make_log([1.0]), column="wall")
