"""Tests for configuration files and project structure."""

from pathlib import Path

import pytest
import yaml

from src.utils.config import (
    ANALYSIS_REPORTS, DEFAULT_CONFIG_PATH, ExperimentConfig, load_config, load_defaults, parse_override,
)
from src.utils.errors import ConfigError

PROJECT_ROOT = Path(__file__).parent.parent


class TestDefaultConfig:
    """Test the shipped default configuration."""

    def test_default_yaml_exists(self):
        assert DEFAULT_CONFIG_PATH.exists()

    def test_sections(self):
        raw = load_defaults()
        assert set(raw) == {"scene", "grid", "head", "loss", "train", "nms", "analysis"}

    def test_builds(self):
        cfg = load_config()
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.head.kind.value == "gflv2_decomposed"
        assert cfg.head.k == 4 and cfg.head.p == 64
        assert cfg.train.grid_n == cfg.grid.n == 16
        assert cfg.qfl.beta == 2.0
        assert cfg.analysis.reports == ANALYSIS_REPORTS

    def test_raw_is_a_copy(self):
        cfg = load_config()
        cfg.to_dict()["head"]["k"] = 99
        assert cfg.to_dict()["head"]["k"] == 4


class TestOverrides:
    """Test file, --set and flag precedence."""

    @pytest.mark.parametrize("text,expected", [
        ("head.k=3", ("head.k", 3)),
        ("train.learning_rate=1e-3", ("train.learning_rate", 0.001)),
        ("scene.image_size=[32, 48]", ("scene.image_size", [32, 48])),
        ("head.detach_stats=true", ("head.detach_stats", True)),
        ("head.variant=gflv1_style", ("head.variant", "gflv1_style")),
    ])
    def test_parse_override(self, text, expected):
        assert parse_override(text) == expected

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_override("head.k")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="head.kk"):
            load_config(overrides=["head.kk=3"])

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError, match="heads.k"):
            load_config(overrides=["heads.k=3"])

    def test_user_file(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"head": {"k": 2}, "train": {"steps": 7}}), encoding="utf-8")
        cfg = load_config(path)
        assert cfg.head.k == 2 and cfg.train.steps == 7

    def test_user_file_unknown_key(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 3}}), encoding="utf-8")
        with pytest.raises(ConfigError, match="train.epochs"):
            load_config(path)

    def test_precedence(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"head": {"k": 2, "p": 16}}), encoding="utf-8")
        cfg = load_config(path, overrides=["head.k=3", "head.p=32"], flags={"head.k": 5, "head.p": None})
        assert cfg.head.k == 5
        assert cfg.head.p == 32

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.yaml")


class TestValidation:
    """Test invalid values surface as ConfigError."""

    @pytest.mark.parametrize("override", [
        "head.variant=centerness",
        "head.k=0",
        "head.k=18",
        "grid.n=0",
        "train.steps=0",
        "nms.iou_threshold=1.5",
        "scene.grid_stride=5",
        "analysis.reports=[pcc, heatmap]",
        "loss.beta=-1",
    ])
    def test_rejects(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_k_may_equal_bin_count(self):
        assert load_config(overrides=["head.k=17"]).head.k == 17


class TestProjectStructure:
    """Test that essential project files exist."""

    @pytest.mark.parametrize("path", [
        "src/detection/distribution.py",
        "src/detection/quality_head.py",
        "src/detection/losses.py",
        "src/detection/geometry.py",
        "src/scenes/synthgen.py",
        "src/training/trainer.py",
        "src/training/gradcheck.py",
        "src/analysis/suppression.py",
        "src/orchestration/cli.py",
        "config/default.yaml",
        "docs/formats.md",
        "tests/fixtures/scene_small.json",
        "requirements.txt",
    ])
    def test_file_exists(self, path):
        assert (PROJECT_ROOT / path).exists(), f"Missing: {path}"

    def test_env_file_in_gitignore(self):
        gitignore = (PROJECT_ROOT / ".gitignore").read_text()
        assert ".env" in gitignore, ".env must be listed in .gitignore"
