"""
Experiment configuration
========================
Loads config/default.yaml, merges a user YAML file, ``--set section.key=value``
overrides and CLI flags (in that order, later wins), rejects unknown keys and
materializes the result into frozen dataclasses.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import yaml

from src.detection.losses import LossWeights, QflConfig
from src.scenes.synthgen import SceneConfig
from src.training.head import HeadVariant
from src.training.trainer import NmsConfig, TrainConfig
from src.utils.errors import ConfigError, LqeError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "config.log")

PROJECT_ROOT = Path(__file__).parent.parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "default.yaml"

ANALYSIS_REPORTS = ("pcc", "scatter", "suppression", "losscurves")


@dataclass(frozen=True)
class GridConfig:
    n: int = 16

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigError(f"grid.n must be a positive integer, got {self.n!r}")


@dataclass(frozen=True)
class AnalysisConfig:
    eval_scenes: int = 32
    eval_offset: int = 1_000_000
    corruption_levels: tuple = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)
    retention_tolerance: float = 0.02
    study_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    reports: tuple = ANALYSIS_REPORTS

    def __post_init__(self):
        object.__setattr__(self, "corruption_levels", tuple(float(v) for v in self.corruption_levels))
        object.__setattr__(self, "seeds", tuple(int(v) for v in self.seeds))
        object.__setattr__(self, "reports", tuple(self.reports))
        unknown = [r for r in self.reports if r not in ANALYSIS_REPORTS]
        if unknown:
            raise ConfigError(f"analysis.reports: unknown report(s) {unknown}")
        if self.eval_scenes < 0:
            raise ConfigError("analysis.eval_scenes must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    head: HeadVariant = field(default_factory=HeadVariant)
    qfl: QflConfig = field(default_factory=QflConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    raw: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        """Resolved mapping in the YAML layout (what the manifest records)."""
        return copy.deepcopy(self.raw)


# ──────────────────────────────────────────────────────────────
# Loading and merging
# ──────────────────────────────────────────────────────────────

def _read_yaml(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return data


def load_defaults() -> dict:
    return _read_yaml(DEFAULT_CONFIG_PATH)


def _set_key(raw: dict, dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if not key or section not in raw:
        raise ConfigError(f"unknown config key '{dotted}'")
    if key not in raw[section]:
        raise ConfigError(f"unknown config key '{dotted}'")
    raw[section][key] = value


def merge_file(raw: dict, user: dict) -> None:
    for section, values in user.items():
        if section not in raw:
            raise ConfigError(f"unknown config key '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be a mapping")
        for key, value in values.items():
            _set_key(raw, f"{section}.{key}", value)


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is parsed as YAML (numbers, lists, booleans)."""
    dotted, sep, value = text.partition("=")
    if not sep or not dotted.strip():
        raise ConfigError(f"override '{text}' must look like section.key=value")
    try:
        parsed = yaml.safe_load(value) if value.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override '{text}': cannot parse value ({exc})") from exc
    if isinstance(parsed, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            parsed = float(parsed)
        except ValueError:
            pass
    return dotted.strip(), parsed


def _build(section: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError, LqeError) as exc:
        raise ConfigError(f"invalid '{section}' configuration: {exc}") from exc


def build_config(raw: dict) -> ExperimentConfig:
    scene = _build("scene", SceneConfig, raw["scene"])
    grid = _build("grid", GridConfig, raw["grid"])
    head_raw = dict(raw["head"])
    head_raw["kind"] = head_raw.pop("variant")
    head = _build("head", HeadVariant, head_raw)
    if head.k > grid.n + 1:
        raise ConfigError(f"head.k={head.k} exceeds the {grid.n + 1} bins of grid.n={grid.n}")
    loss = raw["loss"]
    qfl = _build("loss", QflConfig, {"beta": loss["beta"]})
    weights = _build("loss", LossWeights, {"qfl": loss["w_qfl"], "dfl": loss["w_dfl"], "giou": loss["w_giou"]})
    train = _build("train", TrainConfig, dict(raw["train"], grid_n=grid.n, weights=weights, qfl=qfl))
    nms = _build("nms", NmsConfig, raw["nms"])
    for key in ("iou_threshold", "score_threshold"):
        if not 0.0 <= getattr(nms, key) <= 1.0:
            raise ConfigError(f"nms.{key} must lie in [0, 1]")
    analysis = _build("analysis", AnalysisConfig, raw["analysis"])
    return ExperimentConfig(scene, grid, head, qfl, weights, train, nms, analysis, raw)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
                flags: Optional[dict] = None) -> ExperimentConfig:
    """Resolve the experiment config.

    Args:
        path: optional user YAML file.
        overrides: ``section.key=value`` strings.
        flags: dotted key -> value from dedicated CLI flags; None values are skipped.

    Raises:
        ConfigError: unknown key (the message names it) or invalid value.
    """
    raw = load_defaults()
    if path is not None:
        merge_file(raw, _read_yaml(path))
        logger.debug(f"merged config file {path}")
    for text in overrides or ():
        _set_key(raw, *parse_override(text))
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set_key(raw, dotted, value)
    return build_config(raw)
