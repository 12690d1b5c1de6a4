"""
Checkpoint files
================
Versioned JSON document holding everything needed to rebuild a trained head:
variant flags (k, p, statistic layout, biases), bin grid, the scene config
the head was trained for, and every weight array as ``{shape, data}`` with
``data`` flattened in row-major order. Layout is documented in docs/formats.md.

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces the arrays bit for bit.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from src.detection.distribution import BinGrid
from src.scenes.synthgen import SceneConfig
from src.training.head import HeadVariant, copy_state, init_state, num_parameters
from src.utils.errors import CheckpointError, InvalidArgumentError, LqeError

CHECKPOINT_SCHEMA = "lqelab.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    variant: HeadVariant
    grid: BinGrid
    scene_config: SceneConfig
    state: dict[str, np.ndarray]
    step: int = 0

    @property
    def num_parameters(self) -> int:
        return num_parameters(self.state)

    def check_compatible(self, scene_config: SceneConfig) -> None:
        """Raise CheckpointError unless scenes from ``scene_config`` fit this head."""
        problems = []
        if scene_config.feature_dim != self.scene_config.feature_dim:
            problems.append(f"feature_dim {scene_config.feature_dim} != {self.scene_config.feature_dim}")
        if scene_config.num_classes != self.scene_config.num_classes:
            problems.append(f"num_classes {scene_config.num_classes} != {self.scene_config.num_classes}")
        if scene_config.max_offset > self.grid.yn:
            problems.append(f"max offset {scene_config.max_offset} exceeds grid end {self.grid.yn}")
        if problems:
            raise CheckpointError("checkpoint does not fit the scenes: " + "; ".join(problems))

    def to_document(self) -> dict:
        layout = self.variant.layout
        return {
            "schema": CHECKPOINT_SCHEMA,
            "version": CHECKPOINT_VERSION,
            "step": int(self.step),
            "variant": self.variant.to_dict(),
            "grid": self.grid.to_dict(),
            "stat_layout": layout.to_dict(),
            "k": layout.k,
            "p": self.variant.p,
            "include_variance": layout.use_variance,
            "scene": self.scene_config.to_dict(),
            "arrays": {
                name: {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}
                for name, arr in sorted(self.state.items())
            },
        }

    @classmethod
    def from_document(cls, doc: dict) -> "Checkpoint":
        if not isinstance(doc, dict) or doc.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError("not an lqelab checkpoint document")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {doc.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
        try:
            variant = HeadVariant(**doc["variant"])
            grid = BinGrid(**doc["grid"])
            scene_config = SceneConfig(**doc["scene"])
            state = {}
            for name, entry in doc["arrays"].items():
                data = np.asarray(entry["data"], dtype=np.float64)
                state[name] = data.reshape(tuple(entry["shape"]))
        except (KeyError, TypeError, ValueError, LqeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc

        expected = init_state(variant, scene_config.feature_dim, scene_config.num_classes, grid)
        if set(expected) != set(state):
            raise CheckpointError(
                f"checkpoint arrays {sorted(state)} do not match variant {variant.kind.value} "
                f"({sorted(expected)})")
        for name, arr in expected.items():
            if state[name].shape != arr.shape:
                raise CheckpointError(f"array '{name}' has shape {state[name].shape}, expected {arr.shape}")
            if not np.all(np.isfinite(state[name])):
                raise CheckpointError(f"array '{name}' contains non-finite values")
        return cls(variant, grid, scene_config, state, int(doc.get("step", 0)))

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.variant, self.grid, self.scene_config, copy_state(self.state), self.step)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ckpt.to_document()), encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    return Checkpoint.from_document(doc)


def fresh_checkpoint(variant: HeadVariant, scene_config: SceneConfig, grid_n: int = 16,
                     seed: int = 0) -> Checkpoint:
    """Untrained head for ``scene_config`` on the grid covering its largest offset."""
    if grid_n < variant.k - 1:
        raise InvalidArgumentError(f"grid with {grid_n + 1} bins cannot supply top-{variant.k}")
    grid = BinGrid.covering(scene_config.max_offset, n=grid_n)
    rng = np.random.default_rng(seed)
    state = init_state(variant, scene_config.feature_dim, scene_config.num_classes, grid, rng)
    return Checkpoint(variant, grid, scene_config, state, 0)
