"""
LQELab Observability Module
===========================
Run identity, structured log entries and stage timing for CLI runs.

Stage records stay in memory and end up in the ``manifest.json`` of the
output directory, so every artifact directory documents how it was made.

Usage:
    from src.utils.observability import RunContext, StageTracker

    ctx = RunContext(command="train", seed=7, variant="gflv2")
    tracker = StageTracker(ctx)

    tracker.start_stage("train")
    # ... do work ...
    tracker.end_stage("train", status="SUCCESS", metadata={"steps": 300})
"""

import json
import logging
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Optional

from .logger import setup_logger

_events = setup_logger(__name__, "observability.log")


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


# ──────────────────────────────────────────────────────────────
# Run context: one per CLI invocation
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RunContext:
    """Identity of a single CLI execution."""

    command: str
    seed: Optional[int] = None
    variant: Optional[str] = None
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    started_at: datetime = field(default_factory=_utc_now)

    def __post_init__(self):
        # explicit run_id=None still gets a fresh id
        if not self.run_id:
            object.__setattr__(self, "run_id", uuid.uuid4().hex[:12])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["started_at"] = self.started_at.isoformat()
        return d


# ──────────────────────────────────────────────────────────────
# Structured entries beside the human-readable console log
# ──────────────────────────────────────────────────────────────

class StructuredLogger:
    """Logs a plain message to the component logger and a JSON entry with
    run fields and extras to the observability file."""

    def __init__(self, name: str, log_file: str, ctx: Optional[RunContext] = None):
        self.component = name
        self.ctx = ctx
        self.logger = setup_logger(name, log_file)

    def _build_entry(self, level: str, message: str, **extra: Any) -> str:
        entry: dict[str, Any] = {
            "ts": _utc_now().isoformat(),
            "level": level,
            "component": self.component,
            "message": message,
        }
        if self.ctx is not None:
            entry.update(run_id=self.ctx.run_id, command=self.ctx.command, seed=self.ctx.seed)
        entry.update(extra)
        return json.dumps(entry, default=str)

    def _emit(self, level: int, message: str, extra: dict) -> None:
        self.logger.log(level, message)
        _events.debug(self._build_entry(logging.getLevelName(level), message, **extra))

    def info(self, message: str, **extra: Any) -> None:
        self._emit(logging.INFO, message, extra)

    def warning(self, message: str, **extra: Any) -> None:
        self._emit(logging.WARNING, message, extra)

    def error(self, message: str, **extra: Any) -> None:
        self._emit(logging.ERROR, message, extra)


# ──────────────────────────────────────────────────────────────
# Stage timing, collected into the RunManifest
# ──────────────────────────────────────────────────────────────

@dataclass
class StageRecord:
    stage: str
    status: str
    duration_seconds: float
    error_message: Optional[str] = None
    metadata: dict = field(default_factory=dict)


class StageTracker:
    """Times the stages of one run. ``stages`` holds plain dicts in
    completion order, ready for JSON."""

    def __init__(self, ctx: RunContext):
        self.ctx = ctx
        self.stages: list[dict] = []
        self._open: dict[str, float] = {}

    def start_stage(self, stage: str) -> None:
        self._open[stage] = time.perf_counter()
        _events.info("[%s] stage %s started", self.ctx.run_id, stage)

    def end_stage(self, stage: str, status: str = "SUCCESS",
                  error_message: Optional[str] = None,
                  metadata: Optional[dict] = None) -> float:
        """Close ``stage`` and return its duration in seconds (0 if it was never started)."""
        began = self._open.pop(stage, None)
        duration = 0.0 if began is None else round(time.perf_counter() - began, 3)
        record = StageRecord(stage, status, duration, error_message, dict(metadata or {}))
        self.stages.append(asdict(record))
        _events.info("[%s] stage %s %s in %.2fs", self.ctx.run_id, stage, status, duration)
        return duration
