"""
Synthetic dense-detection scenes
================================
A scene is a regular grid of anchor locations over a W x H canvas with a few
axis-aligned objects. Each location gets a feature vector that linearly
encodes what a detector would see there:

    v = [l, r, t, b] / max_size  ++  one-hot(class)  ++  blur(l, r, t, b)
    feature = A v + eps,   eps ~ N(0, noise_sigma^2)

where (l, r, t, b) are the offsets to the assigned object (to the nearest
object, with an all-zero class block, for negatives). A is a fixed random
full-rank matrix per seed.

A fraction ``ambiguity`` of the objects have blurred edges: each side gets a
noise scale, the side offsets seen by that object's locations are perturbed
with it, and the scale itself is visible in the blur channels. A trained head
should therefore produce flat distributions on blurred sides and sharp ones
elsewhere.

Scenes are a pure function of (config, scene_index).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from tenacity import before_sleep_log, retry, retry_if_exception_type, stop_after_attempt

from src.detection.geometry import encode_array, iou_matrix
from src.detection.losses import Assignment
from src.utils.errors import GenerationError, InvalidArgumentError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "synthgen.log")

# Seed-sequence key of the embedding matrix stream (scene streams use the scene index)
_EMBED_STREAM = 2 ** 31 - 1
DEFAULT_CENTER_RATIO = 0.5


class PlacementError(Exception):
    """One placement attempt produced an object without positive locations."""


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple = (64, 64)
    grid_stride: int = 4
    num_objects: tuple = (1, 3)
    num_classes: int = 3
    ambiguity: float = 0.5
    feature_dim: int = 32
    noise_sigma: float = 0.02
    blur_scale: float = 0.15
    min_size: float = 12.0
    max_size: float = 32.0
    max_object_overlap: float = 0.3
    max_placement_retries: int = 50
    center_ratio: float = DEFAULT_CENTER_RATIO
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "num_objects", tuple(int(v) for v in self.num_objects))
        w, h = self.image_size
        if self.grid_stride <= 0 or w % self.grid_stride or h % self.grid_stride:
            raise InvalidArgumentError(
                f"grid_stride {self.grid_stride} must divide image_size {self.image_size}")
        if self.num_classes < 1:
            raise InvalidArgumentError("num_classes must be >= 1")
        lo, hi = self.num_objects
        if lo < 0 or hi < lo:
            raise InvalidArgumentError(f"num_objects range {self.num_objects} is invalid")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise InvalidArgumentError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if self.noise_sigma < 0 or self.blur_scale < 0:
            raise InvalidArgumentError("noise_sigma and blur_scale must be >= 0")
        if not 0 < self.min_size <= self.max_size or self.max_size > min(w, h):
            raise InvalidArgumentError(
                f"object sizes [{self.min_size}, {self.max_size}] do not fit {self.image_size}")
        if self.feature_dim < self.embed_dim:
            raise InvalidArgumentError(
                f"feature_dim {self.feature_dim} must be >= {self.embed_dim} for a full-rank encoding")
        if self.max_placement_retries < 1:
            raise InvalidArgumentError("max_placement_retries must be >= 1")
        if not 0.0 < self.center_ratio <= 1.0:
            raise InvalidArgumentError("center_ratio must lie in (0, 1]")

    @property
    def embed_dim(self) -> int:
        return 4 + self.num_classes + 4

    @property
    def max_offset(self) -> float:
        return float(self.max_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["num_objects"] = list(self.num_objects)
        return d


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    scene_index: int
    locations: np.ndarray
    features: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    side_noise: np.ndarray
    assignment: np.ndarray

    @property
    def num_locations(self) -> int:
        return int(self.locations.shape[0])

    @property
    def num_objects(self) -> int:
        return int(self.gt_boxes.shape[0])

    @property
    def positive(self) -> np.ndarray:
        return self.assignment >= 0

    @property
    def labels(self) -> np.ndarray:
        """Class label per location, -1 for negatives."""
        out = np.full(self.num_locations, -1, dtype=np.int64)
        pos = self.positive
        out[pos] = self.gt_labels[self.assignment[pos]]
        return out

    @property
    def assigned_boxes(self) -> np.ndarray:
        out = np.zeros((self.num_locations, 4))
        pos = self.positive
        out[pos] = self.gt_boxes[self.assignment[pos]]
        return out

    def to_assignment(self) -> Assignment:
        return Assignment(labels=self.labels, gt_boxes=self.assigned_boxes)


# ──────────────────────────────────────────────────────────────
# Assignment
# ──────────────────────────────────────────────────────────────

def assign(locations: np.ndarray, gt_boxes: np.ndarray,
           center_ratio: float = DEFAULT_CENTER_RATIO) -> np.ndarray:
    """Center-region rule.

    A location is positive for a box when it lies inside the box's central
    region scaled by ``center_ratio``; overlaps go to the smaller box, equal
    areas to the lower index. Returns the gt index per location, -1 if none.
    """
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0 or locations.shape[0] == 0:
        return np.full(locations.shape[0], -1, dtype=np.int64)
    cx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
    cy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
    hw = (gt_boxes[:, 2] - gt_boxes[:, 0]) * center_ratio / 2
    hh = (gt_boxes[:, 3] - gt_boxes[:, 1]) * center_ratio / 2
    x = locations[:, 0:1]
    y = locations[:, 1:2]
    inside = (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hh)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    masked = np.where(inside, areas[None, :], np.inf)
    best = np.argmin(masked, axis=1)
    return np.where(inside.any(axis=1), best, -1).astype(np.int64)


# ──────────────────────────────────────────────────────────────
# Generation
# ──────────────────────────────────────────────────────────────

def grid_locations(config: SceneConfig) -> np.ndarray:
    """Cell centers of the stride grid, row-major."""
    w, h = config.image_size
    s = config.grid_stride
    xs = np.arange(w // s) * s + s / 2
    ys = np.arange(h // s) * s + s / 2
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def embedding_matrix(config: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, _EMBED_STREAM])
    return rng.normal(0.0, 1.0 / np.sqrt(config.embed_dim),
                      size=(config.feature_dim, config.embed_dim))


@retry(
    stop=stop_after_attempt(50),
    retry=retry_if_exception_type(PlacementError),
    before_sleep=before_sleep_log(logger, logging.DEBUG),
    reraise=True,
)
def _place_objects(config: SceneConfig, rng: np.random.Generator,
                   locations: np.ndarray) -> tuple[np.ndarray, ...]:
    w, h = config.image_size
    lo, hi = config.num_objects
    count = int(rng.integers(lo, hi + 1))
    boxes = np.zeros((count, 4))
    for i in range(count):
        bw, bh = rng.uniform(config.min_size, config.max_size, size=2)
        x1 = rng.uniform(0.0, w - bw)
        y1 = rng.uniform(0.0, h - bh)
        boxes[i] = (x1, y1, x1 + bw, y1 + bh)
    labels = rng.integers(0, config.num_classes, size=count)
    ambiguous = rng.random(count) < config.ambiguity
    side_noise = rng.uniform(0.5, 1.0, size=(count, 4)) * config.blur_scale
    side_noise[~ambiguous] = 0.0

    if count > 1:
        overlaps = iou_matrix(boxes, boxes)
        np.fill_diagonal(overlaps, 0.0)
        if overlaps.max() > config.max_object_overlap:
            raise PlacementError("objects overlap beyond max_object_overlap")
    assignment = assign(locations, boxes, config.center_ratio)
    counts = np.bincount(assignment[assignment >= 0], minlength=count)
    if count and counts.min() == 0:
        raise PlacementError("an object received no positive location")
    return boxes, labels.astype(np.int64), side_noise, assignment


def _location_vectors(config: SceneConfig, rng: np.random.Generator, locations: np.ndarray,
                      boxes: np.ndarray, labels: np.ndarray, side_noise: np.ndarray,
                      assignment: np.ndarray) -> np.ndarray:
    n_loc = locations.shape[0]
    m = config.num_classes
    vectors = np.zeros((n_loc, config.embed_dim))
    if boxes.shape[0] == 0:
        return vectors
    pos = assignment >= 0
    # negatives describe the object with the nearest center
    centers = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)
    dist = ((locations[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argmin(dist, axis=1)
    target = np.where(pos, assignment, nearest)

    offsets = encode_array(boxes[target], locations) / config.max_offset
    blur = np.where(pos[:, None], side_noise[target], 0.0)
    evidence = offsets + rng.normal(size=offsets.shape) * blur
    vectors[:, :4] = evidence
    vectors[pos, 4 + labels[target[pos]]] = 1.0
    vectors[:, 4 + m:] = blur
    return vectors


def generate(config: SceneConfig, scene_index: int = 0) -> Scene:
    """Deterministic scene for (config, scene_index)."""
    rng = np.random.default_rng([config.seed, scene_index])
    locations = grid_locations(config)
    placer = _place_objects.retry_with(stop=stop_after_attempt(config.max_placement_retries))
    try:
        boxes, labels, side_noise, assignment = placer(config, rng, locations)
    except PlacementError as exc:
        raise GenerationError(
            f"scene {scene_index}: could not place objects after "
            f"{config.max_placement_retries} attempts ({exc})") from exc

    vectors = _location_vectors(config, rng, locations, boxes, labels, side_noise, assignment)
    features = vectors @ embedding_matrix(config).T
    if config.noise_sigma > 0:
        features = features + rng.normal(0.0, config.noise_sigma, size=features.shape)
    return Scene(config=config, scene_index=int(scene_index), locations=locations,
                 features=features, gt_boxes=boxes, gt_labels=labels,
                 side_noise=side_noise, assignment=assignment)


def generate_many(config: SceneConfig, count: int, start: int = 0,
                  workers: Optional[int] = None) -> list[Scene]:
    """Scenes ``start .. start+count-1``; fans out over threads, result order is by index."""
    indices = list(range(start, start + count))
    if not workers or workers <= 1 or count <= 1:
        return [generate(config, i) for i in indices]
    with ThreadPoolExecutor(max_workers=min(workers, count)) as executor:
        return list(executor.map(lambda i: generate(config, i), indices))
