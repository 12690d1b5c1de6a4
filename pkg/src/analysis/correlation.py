"""
Quality-estimate correlation reports
====================================
PCC between an LQE estimate and the real IoU over positive candidates, and the
two scatter exports:

    sharpness   mean over the four sides of the Top-1 probability vs real IoU
    dgqp_io     the same Top-1 statistic vs the DGQP output I

Plotting is left to external tools; exports are two-column CSV files.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from src.detection.distribution import GeneralDistribution
from src.training.trainer import EvalReport
from src.utils.errors import InvalidInputError, UndefinedCorrelationError

MIN_SAMPLES = 3


def pcc(x, y) -> float:
    """Pearson correlation coefficient.

    Raises:
        UndefinedCorrelationError: fewer than 3 samples or a constant series.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidInputError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < MIN_SAMPLES:
        raise UndefinedCorrelationError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("series contain non-finite values")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r, _ = pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


@dataclass
class PccReport:
    variant: str
    pcc: float
    samples: int
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 <= self.pcc <= 1.0:
            raise InvalidInputError(f"pcc {self.pcc} outside [-1, 1]")
        if self.samples < MIN_SAMPLES:
            raise InvalidInputError(f"pcc report needs at least {MIN_SAMPLES} samples")

    def to_dict(self) -> dict:
        return asdict(self)


def pcc_report(reports: Union[EvalReport, Sequence[EvalReport]], seeds: Sequence[int] = ()) -> PccReport:
    """PCC(quality_estimate, real IoU) over the positives of one or more eval reports."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if not reports:
        raise InvalidInputError("pcc_report needs at least one eval report")
    variants = {r.variant for r in reports}
    if len(variants) != 1:
        raise InvalidInputError(f"eval reports mix variants: {sorted(variants)}")
    pos = pd.concat([r.positives for r in reports], ignore_index=True)
    value = pcc(pos["quality_estimate"], pos["real_iou"])
    return PccReport(variants.pop(), value, len(pos), list(seeds))


# ──────────────────────────────────────────────────────────────
# Scatter exports
# ──────────────────────────────────────────────────────────────

def top1_mean(dists: Union[Sequence[GeneralDistribution], np.ndarray]) -> Union[float, np.ndarray]:
    """Mean over the four sides of each side's largest probability.

    Accepts four GeneralDistributions (returns a float) or a probability
    array shaped (..., 4, n+1).
    """
    if isinstance(dists, np.ndarray):
        if dists.ndim < 2 or dists.shape[-2] != 4:
            raise InvalidInputError(f"expected (..., 4, n+1) probabilities, got {dists.shape}")
        return dists.max(axis=-1).mean(axis=-1)
    if len(dists) != 4:
        raise InvalidInputError(f"need four side distributions, got {len(dists)}")
    return float(np.mean([d.probs.max() for d in dists]))


@dataclass(eq=False)
class ScatterExport:
    x_name: str
    y_name: str
    frame: pd.DataFrame

    def __post_init__(self):
        values = self.frame[[self.x_name, self.y_name]].to_numpy(dtype=np.float64)
        if values.size and (not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0):
            raise InvalidInputError(f"scatter values must lie in [0, 1] ({self.x_name}, {self.y_name})")

    def __len__(self) -> int:
        return len(self.frame)

    def correlation(self) -> float:
        return pcc(self.frame[self.x_name], self.frame[self.y_name])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame[[self.x_name, self.y_name]].to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ScatterExport":
        df = pd.read_csv(path, float_precision="round_trip")
        if df.shape[1] != 2:
            raise InvalidInputError(f"{path}: scatter CSV must have exactly two columns")
        return cls(df.columns[0], df.columns[1], df)


def sharpness_scatter(report: EvalReport) -> ScatterExport:
    """(top1_mean, real_iou) per positive candidate."""
    pos = report.positives
    frame = pd.DataFrame({"top1_mean": pos["top1_mean"].to_numpy(),
                          "real_iou": pos["real_iou"].to_numpy()})
    return ScatterExport("top1_mean", "real_iou", frame)


def dgqp_io_scatter(report: EvalReport) -> ScatterExport:
    """(top1_mean, predicted_i) per positive candidate; needs a DGQP variant."""
    pos = report.positives
    if pos["quality"].isna().any():
        raise InvalidInputError(f"variant {report.variant} has no DGQP output to scatter")
    frame = pd.DataFrame({"top1_mean": pos["top1_mean"].to_numpy(),
                          "predicted_i": pos["quality"].to_numpy()})
    return ScatterExport("top1_mean", "predicted_i", frame)
