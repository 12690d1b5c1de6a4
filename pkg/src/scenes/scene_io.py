"""
Scene serialization
===================
JSON documents for reproducible scene fixtures (schema in docs/formats.md).

Validation runs before a document is turned back into a Scene:
    1. schema tag and version
    2. required keys present, no unknown keys
    3. config section parses into a SceneConfig
    4. array shapes and value ranges
    5. every positive location lies inside its assigned box
"""

import json
from pathlib import Path
from typing import Any, Union

import numpy as np

from src.scenes.synthgen import Scene, SceneConfig
from src.utils.errors import LqeError, SceneSchemaError

SCENE_SCHEMA = "lqelab.scene"
SCENE_SCHEMA_VERSION = 1

REQUIRED_KEYS = (
    "schema", "version", "scene_index", "config", "locations", "features",
    "gt_boxes", "gt_labels", "side_noise", "assignment",
)


def scene_to_document(scene: Scene) -> dict[str, Any]:
    return {
        "schema": SCENE_SCHEMA,
        "version": SCENE_SCHEMA_VERSION,
        "scene_index": scene.scene_index,
        "config": scene.config.to_dict(),
        "locations": scene.locations.tolist(),
        "features": scene.features.tolist(),
        "gt_boxes": scene.gt_boxes.tolist(),
        "gt_labels": scene.gt_labels.tolist(),
        "side_noise": scene.side_noise.tolist(),
        "assignment": scene.assignment.tolist(),
    }


def _matrix(doc: dict, key: str, cols: int) -> np.ndarray:
    try:
        arr = np.asarray(doc[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SceneSchemaError(f"'{key}' must be a list of {cols}-element rows ({exc})") from exc
    if arr.size == 0:
        return arr.reshape(0, cols)
    if arr.ndim != 2 or arr.shape[1] != cols:
        raise SceneSchemaError(f"'{key}' must be a list of {cols}-element rows, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneSchemaError(f"'{key}' contains non-finite values")
    return arr


def validate_scene_document(doc: Any) -> SceneConfig:
    """Check a scene document against the schema; returns its parsed config.

    Raises:
        SceneSchemaError: on the first failed check.
    """
    # ── Check 1: schema tag ───────────────────────────────────
    if not isinstance(doc, dict):
        raise SceneSchemaError("scene document must be a JSON object")
    if doc.get("schema") != SCENE_SCHEMA or doc.get("version") != SCENE_SCHEMA_VERSION:
        raise SceneSchemaError(
            f"expected schema {SCENE_SCHEMA} v{SCENE_SCHEMA_VERSION}, "
            f"got {doc.get('schema')} v{doc.get('version')}")

    # ── Check 2: keys ─────────────────────────────────────────
    missing = [k for k in REQUIRED_KEYS if k not in doc]
    if missing:
        raise SceneSchemaError(f"scene document is missing keys: {missing}")
    unknown = sorted(set(doc) - set(REQUIRED_KEYS))
    if unknown:
        raise SceneSchemaError(f"scene document has unknown keys: {unknown}")

    # ── Check 3: config ───────────────────────────────────────
    try:
        config = SceneConfig(**doc["config"])
    except (TypeError, LqeError) as exc:
        raise SceneSchemaError(f"invalid scene config: {exc}") from exc

    # ── Check 4: shapes and ranges ────────────────────────────
    locations = _matrix(doc, "locations", 2)
    features = _matrix(doc, "features", config.feature_dim)
    boxes = _matrix(doc, "gt_boxes", 4)
    side_noise = _matrix(doc, "side_noise", 4)
    labels = np.asarray(doc["gt_labels"], dtype=np.int64).reshape(-1)
    assignment = np.asarray(doc["assignment"], dtype=np.int64).reshape(-1)
    n_loc, n_obj = locations.shape[0], boxes.shape[0]

    if features.shape[0] != n_loc or assignment.shape[0] != n_loc:
        raise SceneSchemaError(
            f"locations ({n_loc}), features ({features.shape[0]}) and assignment "
            f"({assignment.shape[0]}) must have equal length")
    if labels.shape[0] != n_obj or side_noise.shape[0] != n_obj:
        raise SceneSchemaError("gt_labels and side_noise need one row per gt box")
    if n_obj and (np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1])):
        raise SceneSchemaError("gt_boxes need x2 >= x1 and y2 >= y1")
    if np.any((labels < 0) | (labels >= config.num_classes)):
        raise SceneSchemaError(f"gt_labels must lie in [0, {config.num_classes})")
    if np.any(side_noise < 0):
        raise SceneSchemaError("side_noise must be non-negative")
    if np.any((assignment < -1) | (assignment >= n_obj)):
        raise SceneSchemaError(f"assignment entries must lie in [-1, {n_obj})")

    # ── Check 5: positives inside their box ───────────────────
    pos = assignment >= 0
    if pos.any():
        b = boxes[assignment[pos]]
        x, y = locations[pos, 0], locations[pos, 1]
        inside = (b[:, 0] <= x) & (x <= b[:, 2]) & (b[:, 1] <= y) & (y <= b[:, 3])
        if not inside.all():
            raise SceneSchemaError(
                f"{int((~inside).sum())} positive locations lie outside their assigned box")
    return config


def scene_from_document(doc: dict) -> Scene:
    config = validate_scene_document(doc)
    return Scene(
        config=config,
        scene_index=int(doc["scene_index"]),
        locations=_matrix(doc, "locations", 2),
        features=_matrix(doc, "features", config.feature_dim),
        gt_boxes=_matrix(doc, "gt_boxes", 4),
        gt_labels=np.asarray(doc["gt_labels"], dtype=np.int64).reshape(-1),
        side_noise=_matrix(doc, "side_noise", 4),
        assignment=np.asarray(doc["assignment"], dtype=np.int64).reshape(-1),
    )


def write_scene(scene: Scene, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene_to_document(scene), indent=1, sort_keys=True), encoding="utf-8")
    return path


def read_scene(path: Union[str, Path]) -> Scene:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneSchemaError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_document(doc)
