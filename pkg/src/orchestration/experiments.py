"""
Matched-seed experiments
========================
Train/evaluate jobs fanned out over a thread pool; every job is a pure
function of (config, variant, seed), so results do not depend on the pool
size and come back in submission order.

    compare_variants     gflv1_style vs gflv2_decomposed vs gflv2_composed
    structure_sweep      DGQP (k, p) grid; k = 0 is the gflv1_style baseline
    statistic_ablation   Top-k / Mean / Top-k+Mean / Top-k+Mean+Var inputs
    composed_sweep       composed form at several embedding widths d
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.analysis.correlation import pcc_report
from src.analysis.curves import CurveComparison, loss_curve_compare
from src.scenes.sources import SyntheticSceneSource
from src.training.checkpoint import Checkpoint
from src.training.head import HeadVariant, VariantKind
from src.training.trainer import EvalReport, TrainLog, evaluate, train
from src.utils.config import ExperimentConfig
from src.utils.errors import UndefinedCorrelationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__, "experiments.log")


@dataclass(eq=False)
class VariantRun:
    label: str
    variant: HeadVariant
    seed: int
    checkpoint: Checkpoint
    log: TrainLog
    report: EvalReport
    pcc: float

    def row(self) -> dict:
        final = self.log.records[-1]
        return {"label": self.label, "variant": self.variant.kind.value, "seed": self.seed,
                "k": self.variant.k, "p": self.variant.p, "layout": self.variant.layout.name,
                "composed_dim": self.variant.composed_dim, "pcc": self.pcc,
                "samples": int(self.report.positives.shape[0]),
                "final_total": final["total"], "final_qfl_pos": final["qfl_pos"]}


def seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with scene stream and initialization keyed by ``seed``."""
    return replace(cfg, scene=replace(cfg.scene, seed=seed), train=replace(cfg.train, seed=seed))


def eval_scenes(cfg: ExperimentConfig, source: Optional[SyntheticSceneSource] = None) -> list:
    source = source or SyntheticSceneSource(cfg.scene)
    start = cfg.analysis.eval_offset
    return source.batch(range(start, start + cfg.analysis.eval_scenes))


def run_variant(cfg: ExperimentConfig, variant: HeadVariant, seed: int, label: str = "") -> VariantRun:
    cfg = seeded(cfg, seed)
    source = SyntheticSceneSource(cfg.scene, workers=cfg.train.workers or None)
    ckpt, log = train(cfg.train, source, variant)
    report = evaluate(ckpt, eval_scenes(cfg, source), cfg.nms)
    try:
        value = pcc_report(report, [seed]).pcc
    except UndefinedCorrelationError as exc:
        logger.warning(f"{label or variant.kind.value} seed {seed}: PCC undefined ({exc})")
        value = float("nan")
    return VariantRun(label or variant.kind.value, variant, seed, ckpt, log, report, value)


def run_jobs(cfg: ExperimentConfig, jobs: Sequence[tuple[str, HeadVariant, int]],
             workers: Optional[int] = None) -> list[VariantRun]:
    logger.info(f"Running {len(jobs)} training jobs ({workers or 1} workers)")
    if not workers or workers <= 1:
        return [run_variant(cfg, v, s, label) for label, v, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda job: run_variant(cfg, job[1], job[2], job[0]), jobs))


def runs_frame(runs: Sequence[VariantRun]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in runs])


# ──────────────────────────────────────────────────────────────
# Variant comparison
# ──────────────────────────────────────────────────────────────

@dataclass(eq=False)
class CompareResult:
    runs: list
    curves: list

    @property
    def table(self) -> pd.DataFrame:
        return runs_frame(self.runs)

    def pcc_pivot(self) -> pd.DataFrame:
        return self.table.pivot(index="seed", columns="label", values="pcc")

    def summary(self) -> dict:
        pivot = self.pcc_pivot()
        out: dict = {"seeds": [int(s) for s in pivot.index]}
        v1, v2, comp = (VariantKind.GFLV1_STYLE.value, VariantKind.GFLV2_DECOMPOSED.value,
                        VariantKind.GFLV2_COMPOSED.value)
        if {v1, v2} <= set(pivot.columns):
            diff = pivot[v2] - pivot[v1]
            out["pcc_decomposed_over_v1_wins"] = int((diff > 0).sum())
            out["pcc_decomposed_over_v1_mean"] = float(diff.mean())
        if {comp, v2} <= set(pivot.columns):
            diff = pivot[v2] - pivot[comp]
            out["pcc_decomposed_ge_composed_wins"] = int((diff >= 0).sum())
            out["pcc_decomposed_minus_composed_mean"] = float(diff.mean())
        if self.curves:
            gaps = np.array([c.final_gap for c in self.curves])
            out["qfl_pos_final_gap"] = gaps.tolist()
            out["qfl_pos_lower_wins"] = int((gaps <= 0).sum())
            out["qfl_pos_auc_gap"] = [c.auc_gap for c in self.curves]
        return out


def compare_variants(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
                     kinds: Sequence[VariantKind] = tuple(VariantKind),
                     workers: Optional[int] = None) -> CompareResult:
    """Train every variant kind on matched seeds (head flags taken from ``cfg.head``)."""
    # duplicates would collide in the seed pivot; keep first occurrence order
    seeds = list(dict.fromkeys(int(s) for s in (cfg.analysis.seeds if seeds is None else seeds)))
    jobs = [(kind.value, replace(cfg.head, kind=kind), s) for s in seeds for kind in kinds]
    runs = run_jobs(cfg, jobs, workers)
    curves: list[CurveComparison] = []
    by_key = {(r.label, r.seed): r for r in runs}
    v1, v2 = VariantKind.GFLV1_STYLE.value, VariantKind.GFLV2_DECOMPOSED.value
    for s in seeds:
        if (v1, s) in by_key and (v2, s) in by_key:
            curve = loss_curve_compare(by_key[(v1, s)].log, by_key[(v2, s)].log, "qfl_pos", (v1, v2))
            curve.seed = s
            curves.append(curve)
    return CompareResult(runs, curves)


# ──────────────────────────────────────────────────────────────
# Sweeps
# ──────────────────────────────────────────────────────────────

def structure_sweep(cfg: ExperimentConfig, ks: Sequence[int] = (0, 1, 2, 3, 4, 8),
                    ps: Sequence[int] = (8, 16, 32, 64, 128), seeds: Optional[Sequence[int]] = None,
                    workers: Optional[int] = None) -> pd.DataFrame:
    """PCC and final positive QFL per (k, p); k = 0 rows are the gflv1_style baseline."""
    seeds = list(cfg.analysis.seeds if seeds is None else seeds)
    jobs = []
    for s in seeds:
        if 0 in ks:
            jobs.append(("k0", replace(cfg.head, kind=VariantKind.GFLV1_STYLE), s))
        for k in ks:
            if k == 0:
                continue
            for p in ps:
                variant = replace(cfg.head, kind=VariantKind.GFLV2_DECOMPOSED, k=k, p=p)
                jobs.append((f"k{k}_p{p}", variant, s))
    return runs_frame(run_jobs(cfg, jobs, workers))


STAT_LAYOUTS = {
    "topk": dict(use_topk=True, use_mean=False, include_variance=False),
    "mean": dict(use_topk=False, use_mean=True, include_variance=False),
    "topk+mean": dict(use_topk=True, use_mean=True, include_variance=False),
    "topk+mean+var": dict(use_topk=True, use_mean=True, include_variance=True),
}


def statistic_ablation(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None,
                       workers: Optional[int] = None) -> pd.DataFrame:
    seeds = list(cfg.analysis.seeds if seeds is None else seeds)
    jobs = [(name, replace(cfg.head, kind=VariantKind.GFLV2_DECOMPOSED, **flags), s)
            for s in seeds for name, flags in STAT_LAYOUTS.items()]
    return runs_frame(run_jobs(cfg, jobs, workers))


def composed_sweep(cfg: ExperimentConfig, dims: Sequence[int] = (16, 32, 64, 128),
                   seeds: Optional[Sequence[int]] = None, workers: Optional[int] = None) -> pd.DataFrame:
    """Composed form at each width d next to the decomposed form on the same seeds."""
    seeds = list(cfg.analysis.seeds if seeds is None else seeds)
    jobs = []
    for s in seeds:
        jobs.append(("decomposed", replace(cfg.head, kind=VariantKind.GFLV2_DECOMPOSED), s))
        for d in dims:
            jobs.append((f"composed_d{d}", replace(cfg.head, kind=VariantKind.GFLV2_COMPOSED,
                                                   composed_dim=d), s))
    return runs_frame(run_jobs(cfg, jobs, workers))
