"""Scene sources - where training and evaluation batches come from.

A source hands out scenes by integer index. The synthetic source is an
unbounded deterministic stream; the fixture source cycles over JSON files
written by ``scene_io``.
"""

import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.scenes.scene_io import read_scene
from src.scenes.synthgen import Scene, SceneConfig, generate, generate_many
from src.utils.errors import InvalidArgumentError, SceneSchemaError
from src.utils.logger import setup_logger


def positives_inside(scene: Scene) -> bool:
    """Every positive location lies inside (or on the border of) its gt box."""
    pos = scene.positive
    if not pos.any():
        return True
    b = scene.gt_boxes[scene.assignment[pos]]
    x, y = scene.locations[pos, 0], scene.locations[pos, 1]
    return bool(np.all((b[:, 0] <= x) & (x <= b[:, 2]) & (b[:, 1] <= y) & (y <= b[:, 3])))


class BaseSceneSource(ABC):
    """Abstract base class for scene sources"""

    def __init__(self):
        self.logger = setup_logger(self.__class__.__name__, f"{self.__class__.__name__}.log")

    @abstractmethod
    def fetch_scene(self, index: int) -> Scene:
        """Produce scene ``index`` - implement in subclass"""

    @abstractmethod
    def describe(self) -> dict:
        """JSON-safe description for the run manifest - implement in subclass"""

    @property
    @abstractmethod
    def config(self) -> SceneConfig:
        """Scene config shared by every scene of this source"""

    def validate_scene(self, scene: Scene) -> bool:
        return (scene.config == self.config
                and scene.features.shape == (scene.num_locations, self.config.feature_dim)
                and positives_inside(scene))

    def load(self, index: int) -> Scene:
        """Fetch, validate and return one scene."""
        t0 = time.time()
        scene = self.fetch_scene(index)
        if not self.validate_scene(scene):
            raise SceneSchemaError(f"{self.__class__.__name__}: scene {index} failed validation")
        self.logger.debug(
            f"scene {index}: {scene.num_objects} objects, {int(scene.positive.sum())} positives, "
            f"{time.time() - t0:.3f}s")
        return scene

    def batch(self, indices: Sequence[int]) -> list[Scene]:
        return [self.load(i) for i in indices]


class SyntheticSceneSource(BaseSceneSource):
    """Unbounded stream of generated scenes; scene i is generate(config, i)."""

    def __init__(self, config: SceneConfig, workers: Optional[int] = None):
        super().__init__()
        self._config = config
        self.workers = workers

    @property
    def config(self) -> SceneConfig:
        return self._config

    def fetch_scene(self, index: int) -> Scene:
        return generate(self._config, index)

    def batch(self, indices: Sequence[int]) -> list[Scene]:
        indices = list(indices)
        if (not self.workers or len(indices) < 2
                or indices != list(range(indices[0], indices[0] + len(indices)))):
            return super().batch(indices)
        scenes = generate_many(self._config, len(indices), start=indices[0], workers=self.workers)
        for i, scene in zip(indices, scenes):
            if not self.validate_scene(scene):
                raise SceneSchemaError(f"SyntheticSceneSource: scene {i} failed validation")
        return scenes

    def describe(self) -> dict:
        return {"kind": "synthetic", "config": self._config.to_dict()}


class FixtureSceneSource(BaseSceneSource):
    """Scenes read from JSON fixture files; indices wrap around the file list."""

    def __init__(self, paths: Sequence[Union[str, Path]]):
        super().__init__()
        self.paths = [Path(p) for p in paths]
        if not self.paths:
            raise InvalidArgumentError("FixtureSceneSource needs at least one scene file")
        self._cache: dict[int, Scene] = {}
        first = self._read(0)
        self._config = first.config

    @classmethod
    def from_directory(cls, directory: Union[str, Path]) -> "FixtureSceneSource":
        paths = sorted(Path(directory).glob("scene_*.json"))
        if not paths:
            raise InvalidArgumentError(f"no scene_*.json files under {directory}")
        return cls(paths)

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def config(self) -> SceneConfig:
        return self._config

    def _read(self, slot: int) -> Scene:
        if slot not in self._cache:
            self._cache[slot] = read_scene(self.paths[slot])
        return self._cache[slot]

    def fetch_scene(self, index: int) -> Scene:
        return self._read(index % len(self.paths))

    def all(self) -> list[Scene]:
        return self.batch(range(len(self.paths)))

    def describe(self) -> dict:
        return {"kind": "fixture", "paths": [str(p) for p in self.paths]}
