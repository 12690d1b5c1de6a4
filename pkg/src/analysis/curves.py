"""Matched-seed loss-curve comparison (reference vs candidate variant).

Gaps are candidate minus reference: a negative final gap on ``qfl_pos``
means the candidate converged to a lower LQE loss.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from src.training.trainer import TrainLog
from src.utils.errors import InvalidInputError

CURVE_COMPONENTS = ("total", "qfl", "qfl_pos", "dfl", "giou")


@dataclass(eq=False)
class CurveComparison:
    reference: str
    candidate: str
    column: str
    frame: pd.DataFrame
    final_gap: float
    auc_gap: float
    seed: Optional[int] = None

    def summary(self) -> dict:
        out = {"reference": self.reference, "candidate": self.candidate, "column": self.column,
               "steps": len(self.frame), "final_gap": self.final_gap, "auc_gap": self.auc_gap}
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)
        return path


def _gaps(steps: np.ndarray, ref: np.ndarray, cand: np.ndarray) -> tuple[float, float]:
    final = float(cand[-1] - ref[-1])
    if steps.size < 2:
        return final, 0.0
    return final, float(trapezoid(cand, steps) - trapezoid(ref, steps))


def loss_curve_compare(reference: TrainLog, candidate: TrainLog, column: str = "qfl_pos",
                       names: tuple = ("gflv1_style", "gflv2_decomposed")) -> CurveComparison:
    """Pair two logs step by step and compute final-value and area gaps of ``column``."""
    if column not in CURVE_COMPONENTS:
        raise InvalidInputError(f"unknown loss column '{column}' (expected one of {CURVE_COMPONENTS})")
    ref, cand = reference.frame, candidate.frame
    if len(ref) == 0 or len(ref) != len(cand):
        raise InvalidInputError(f"logs need equal, non-zero step counts ({len(ref)} vs {len(cand)})")
    if not np.array_equal(ref["step"].to_numpy(), cand["step"].to_numpy()):
        raise InvalidInputError("logs are not recorded at the same steps")

    ref_name, cand_name = names
    frame = pd.DataFrame({"step": ref["step"].to_numpy()})
    for c in CURVE_COMPONENTS:
        frame[f"{ref_name}.{c}"] = ref[c].to_numpy(dtype=np.float64)
        frame[f"{cand_name}.{c}"] = cand[c].to_numpy(dtype=np.float64)
    final, auc = _gaps(frame["step"].to_numpy(dtype=np.float64),
                       frame[f"{ref_name}.{column}"].to_numpy(), frame[f"{cand_name}.{column}"].to_numpy())
    return CurveComparison(ref_name, cand_name, column, frame, final, auc)


def read_curves(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")
