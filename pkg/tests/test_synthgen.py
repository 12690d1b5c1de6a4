"""Tests for synthetic scene generation and scene sources."""

from dataclasses import replace

import numpy as np
import pytest

from src.scenes.sources import FixtureSceneSource, SyntheticSceneSource, positives_inside
from src.scenes.synthgen import (
    SceneConfig, assign, embedding_matrix, generate, generate_many, grid_locations,
)
from src.utils.errors import GenerationError, InvalidArgumentError


class TestSceneConfig:
    """Test scene configuration validation."""

    def test_defaults_valid(self):
        cfg = SceneConfig()
        assert cfg.embed_dim == 4 + cfg.num_classes + 4
        assert cfg.max_offset == cfg.max_size

    @pytest.mark.parametrize("kwargs", [
        {"grid_stride": 5},
        {"num_classes": 0},
        {"num_objects": (3, 1)},
        {"ambiguity": 1.5},
        {"feature_dim": 4},
        {"max_size": 100.0},
    ])
    def test_invalid_values(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            SceneConfig(**kwargs)

    def test_to_dict_round_trip(self):
        cfg = SceneConfig(image_size=(32, 48), num_objects=(2, 2))
        assert SceneConfig(**cfg.to_dict()) == cfg


class TestAssign:
    """Test the center-region assignment rule."""

    def test_center_is_positive(self):
        out = assign(np.array([[10.0, 10.0]]), np.array([[0.0, 0.0, 20.0, 20.0]]))
        assert out.tolist() == [0]

    def test_outside_is_negative(self):
        out = assign(np.array([[50.0, 50.0]]), np.array([[0.0, 0.0, 20.0, 20.0]]))
        assert out.tolist() == [-1]

    def test_nested_boxes_prefer_smaller(self):
        boxes = np.array([[0.0, 0.0, 40.0, 40.0], [15.0, 15.0, 25.0, 25.0]])
        locs = np.array([[20.0, 20.0], [12.0, 20.0]])
        out = assign(locs, boxes)
        assert out.tolist() == [1, 0]

    def test_matches_brute_force(self, rng):
        locs = rng.uniform(0, 64, size=(200, 2))
        xy = rng.uniform(0, 40, size=(6, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(8, 24, size=(6, 2))], axis=1)
        fast = assign(locs, boxes, 0.5)
        for n, (x, y) in enumerate(locs):
            best, best_area = -1, np.inf
            for i, (x1, y1, x2, y2) in enumerate(boxes):
                cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
                if abs(x - cx) <= (x2 - x1) / 4 and abs(y - cy) <= (y2 - y1) / 4:
                    area = (x2 - x1) * (y2 - y1)
                    if area < best_area:
                        best, best_area = i, area
            assert fast[n] == best

    def test_no_boxes(self):
        assert assign(np.zeros((3, 2)), np.zeros((0, 4))).tolist() == [-1, -1, -1]


class TestGenerate:
    """Test deterministic scene generation."""

    def test_same_seed_identical(self, small_scene_config):
        a, b = generate(small_scene_config, 5), generate(small_scene_config, 5)
        for field in ("locations", "features", "gt_boxes", "gt_labels", "side_noise", "assignment"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_different_indices_differ(self, small_scene_config):
        a, b = generate(small_scene_config, 0), generate(small_scene_config, 1)
        assert not np.array_equal(a.features, b.features)

    def test_every_object_has_a_positive(self, small_scene_config):
        for i in range(20):
            scene = generate(small_scene_config, i)
            counts = np.bincount(scene.assignment[scene.positive], minlength=scene.num_objects)
            assert counts.min() >= 1
            assert positives_inside(scene)

    def test_shapes(self, small_scene_config):
        scene = generate(small_scene_config, 0)
        assert scene.locations.shape == (64, 2)
        assert scene.features.shape == (64, small_scene_config.feature_dim)
        np.testing.assert_array_equal(scene.locations, grid_locations(small_scene_config))

    def test_unambiguous_features_encode_offsets_exactly(self, small_scene_config):
        cfg = replace(small_scene_config, ambiguity=0.0, noise_sigma=0.0)
        scene = generate(cfg, 3)
        emb = embedding_matrix(cfg)
        decoded, *_ = np.linalg.lstsq(emb, scene.features.T, rcond=None)
        pos = scene.positive
        offsets = np.stack([
            scene.locations[pos, 0] - scene.gt_boxes[scene.assignment[pos], 0],
            scene.gt_boxes[scene.assignment[pos], 2] - scene.locations[pos, 0],
            scene.locations[pos, 1] - scene.gt_boxes[scene.assignment[pos], 1],
            scene.gt_boxes[scene.assignment[pos], 3] - scene.locations[pos, 1],
        ], axis=1) / cfg.max_offset
        np.testing.assert_allclose(decoded.T[pos, :4], offsets, atol=1e-9)
        assert not np.any(scene.side_noise)

    def test_infeasible_placement(self):
        cfg = SceneConfig(image_size=(16, 16), num_objects=(6, 6), min_size=12.0, max_size=16.0,
                          feature_dim=16, max_object_overlap=0.0, max_placement_retries=3)
        with pytest.raises(GenerationError):
            generate(cfg, 0)

    def test_zero_objects(self, small_scene_config):
        scene = generate(replace(small_scene_config, num_objects=(0, 0)), 0)
        assert scene.num_objects == 0
        assert not scene.positive.any()

    def test_parallel_matches_serial(self, small_scene_config):
        serial = generate_many(small_scene_config, 6, start=10)
        threaded = generate_many(small_scene_config, 6, start=10, workers=3)
        assert [s.scene_index for s in threaded] == list(range(10, 16))
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.features, b.features)

    def test_ambiguity_raises_evidence_noise(self, small_scene_config):
        pinv = np.linalg.pinv(embedding_matrix(replace(small_scene_config, noise_sigma=0.0)))
        blur_means, error_means = [], []
        for level in (0.0, 0.25, 0.5, 0.75, 1.0):
            cfg = replace(small_scene_config, ambiguity=level, noise_sigma=0.0)
            scenes = generate_many(cfg, 800)
            assert sum(s.num_objects for s in scenes) >= 1000
            blur = np.concatenate([s.side_noise for s in scenes])
            errors = []
            for s in scenes:
                pos = s.positive
                gt = s.gt_boxes[s.assignment[pos]]
                loc = s.locations[pos]
                offsets = np.stack([loc[:, 0] - gt[:, 0], gt[:, 2] - loc[:, 0],
                                    loc[:, 1] - gt[:, 1], gt[:, 3] - loc[:, 1]], axis=1) / cfg.max_offset
                errors.append(np.abs((s.features[pos] @ pinv.T)[:, :4] - offsets))
            blur_means.append(blur.mean())
            error_means.append(np.concatenate(errors).mean())
        assert blur_means[0] == 0.0
        assert np.all(np.diff(blur_means) > 0)
        assert error_means[0] < 1e-9
        assert np.all(np.diff(error_means) > 0)


class TestSceneSources:
    """Test synthetic and fixture scene sources."""

    def test_synthetic_source_is_generate(self, small_scene_config):
        source = SyntheticSceneSource(small_scene_config)
        np.testing.assert_array_equal(source.load(4).features, generate(small_scene_config, 4).features)

    def test_synthetic_batch_with_workers(self, small_scene_config):
        source = SyntheticSceneSource(small_scene_config, workers=2)
        scenes = source.batch(range(3, 7))
        assert [s.scene_index for s in scenes] == [3, 4, 5, 6]

    def test_fixture_source_wraps(self, scene_fixture_path):
        source = FixtureSceneSource([scene_fixture_path])
        assert len(source) == 1
        assert source.load(3).scene_index == 0
        assert source.describe()["kind"] == "fixture"

    def test_fixture_directory_needs_files(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            FixtureSceneSource.from_directory(tmp_path)

    def test_describe_records_config(self, small_scene_config):
        desc = SyntheticSceneSource(small_scene_config).describe()
        assert desc["config"]["seed"] == small_scene_config.seed
