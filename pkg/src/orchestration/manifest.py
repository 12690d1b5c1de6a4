"""
Run manifest
============
Written into every artifact directory. Records the resolved configuration,
seed, variant, scene source, the artifacts produced (paths relative to the directory) and
the stage timings, which is enough to rerun the command bit for bit:

    cfg = manifest_config(load_manifest(out_dir))
"""

import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src import __version__
from src.utils.config import ExperimentConfig, build_config, load_defaults, merge_file
from src.utils.errors import ConfigError
from src.utils.observability import RunContext

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = "lqelab.manifest"
MANIFEST_VERSION = 1


@dataclass
class RunManifest:
    command: str
    run_id: str
    seed: Optional[int]
    variant: Optional[str]
    config: dict
    artifacts: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    argv: list = field(default_factory=list)
    source: dict = field(default_factory=dict)
    tool_version: str = __version__
    environment: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__})
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @classmethod
    def start(cls, ctx: RunContext, cfg: Optional[ExperimentConfig], argv: Optional[list] = None) -> "RunManifest":
        return cls(command=ctx.command, run_id=ctx.run_id, seed=ctx.seed, variant=ctx.variant,
                   config=cfg.to_dict() if cfg is not None else {}, argv=list(argv or []))

    def add_artifact(self, name: str, path: Union[str, Path], root: Union[str, Path]) -> None:
        path, root = Path(path), Path(root)
        try:
            self.artifacts[name] = path.relative_to(root).as_posix()
        except ValueError:
            self.artifacts[name] = path.as_posix()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = MANIFEST_SCHEMA
        d["version"] = MANIFEST_VERSION
        return d

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str), encoding="utf-8")
        return path


def load_manifest(directory: Union[str, Path]) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no {MANIFEST_NAME} in {directory}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError(f"{path} is not an lqelab manifest")
    return doc


def manifest_config(doc: dict) -> ExperimentConfig:
    """Rebuild the experiment config a manifest was written with."""
    raw = load_defaults()
    merge_file(raw, doc.get("config", {}))
    return build_config(raw)
