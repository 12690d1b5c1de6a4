"""
LQELab command line
===================
Subcommands follow the experiment lifecycle:

    gen        write synthetic scene fixtures (JSON) + manifest
    train      train one head variant; writes checkpoint.json, train_log.csv
    analyze    evaluate a checkpoint and write the selected CSV reports
    checkgrad  run the finite-difference gradient suites
    compare    matched-seed gflv1_style / gflv2_decomposed / gflv2_composed runs

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Usage:
    python -m src.orchestration.cli gen --count 8 --out runs/scenes
    python -m src.orchestration.cli train --variant gflv2 --seed 3 --out runs/v2
    python -m src.orchestration.cli analyze --checkpoint runs/v2/checkpoint.json --out runs/v2/analysis
    python -m src.orchestration.cli checkgrad --trials 100
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

load_dotenv()

from src.analysis.correlation import dgqp_io_scatter, pcc_report, sharpness_scatter
from src.analysis.curves import loss_curve_compare
from src.analysis.suppression import random_ranking_baseline, suppression_study
from src.orchestration.experiments import compare_variants, eval_scenes
from src.orchestration.manifest import RunManifest
from src.scenes.scene_io import write_scene
from src.scenes.sources import FixtureSceneSource, SyntheticSceneSource
from src.scenes.synthgen import generate_many
from src.training.checkpoint import load_checkpoint, save_checkpoint
from src.training.gradcheck import SUITES, run_gradcheck
from src.training.head import VARIANT_ALIASES, VariantKind
from src.training.trainer import EvalReport, TrainLog, evaluate, train
from src.utils.config import ANALYSIS_REPORTS, ExperimentConfig, load_config
from src.utils.errors import ConfigError, LqeError, TrainingDivergedError
from src.utils.logger import setup_logger
from src.utils.observability import RunContext, StageTracker, StructuredLogger

logger = setup_logger(__name__, "cli.log")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(ConfigError):
    """Flag combination that cannot be run."""


def _variant_name(value: str) -> str:
    if value in VARIANT_ALIASES:
        return VARIANT_ALIASES[value].value
    return VariantKind(value).value


# ──────────────────────────────────────────────────────────────
# Argument parsing
# ──────────────────────────────────────────────────────────────

def _add_config_flags(p: argparse.ArgumentParser, head: bool = True) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML config file (sections as in config/default.yaml)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="Override one config key; repeatable")
    p.add_argument("--seed", type=int, default=None,
                   help="Seed for scenes and initialization (analyze: evaluation scene stream)")
    if head:
        p.add_argument("--variant", choices=sorted(VARIANT_ALIASES) + [k.value for k in VariantKind],
                       default=None, help="Head variant")
        p.add_argument("--k", type=int, default=None, help="Top-k of the statistic feature")
        p.add_argument("--p", type=int, default=None, help="DGQP hidden width")
        p.add_argument("--detach-stats", action="store_true", default=None,
                       help="Stop QFL gradients at the statistic feature")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqelab",
        description="LQELab - distribution-guided localization quality estimation experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  lqelab gen --count 8 --out runs/scenes
  lqelab train --variant gflv1 --seed 1 --out runs/v1
  lqelab analyze --checkpoint runs/v1/checkpoint.json --reports pcc,scatter --out runs/v1/analysis
  lqelab checkgrad --trials 0
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="Generate scene fixtures")
    _add_config_flags(p, head=False)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--start", type=int, default=0, help="First scene index")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="Train a head variant")
    _add_config_flags(p)
    p.add_argument("--scenes", type=Path, default=None, help="Train on fixture files instead of the synthetic stream")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("analyze", help="Evaluate a checkpoint and write reports")
    _add_config_flags(p, head=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes", type=Path, default=None, help="Directory of scene_*.json fixtures")
    p.add_argument("--reports", default=None,
                   help=f"Comma list from {', '.join(ANALYSIS_REPORTS)} (default: analysis.reports); "
                        "empty writes the manifest only")
    p.add_argument("--oracle", action="store_true", help="Also run the suppression study with I := real IoU")
    p.add_argument("--curve-logs", nargs=2, type=Path, default=None, metavar=("REFERENCE", "CANDIDATE"),
                   help="train_log.csv files for the losscurves report")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("checkgrad", help="Run the finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--suites", default=None, help=f"Comma list from {', '.join(SUITES)}")
    p.add_argument("--sabotage", action="store_true", default=None,
                   help="Scale analytic gradients by 1.01 (negative control)")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("compare", help="Matched-seed variant comparison")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """flag > --set > file > defaults."""
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["scene.seed"] = args.seed
        flags["train.seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        flags["head.variant"] = _variant_name(args.variant)
    for name in ("k", "p"):
        if getattr(args, name, None) is not None:
            flags[f"head.{name}"] = getattr(args, name)
    if getattr(args, "detach_stats", None):
        flags["head.detach_stats"] = True
    return load_config(args.config, args.overrides, flags)


# ──────────────────────────────────────────────────────────────
# Commands
# ──────────────────────────────────────────────────────────────

def cmd_gen(args, cfg: ExperimentConfig, manifest: RunManifest, tracker: StageTracker) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    tracker.start_stage("gen")
    scenes = generate_many(cfg.scene, args.count, start=args.start, workers=cfg.train.workers or None)
    for scene in scenes:
        path = write_scene(scene, args.out / f"scene_{scene.scene_index:05d}.json")
        manifest.add_artifact(path.stem, path, args.out)
    tracker.end_stage("gen", metadata={"scenes": len(scenes)})
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig, manifest: RunManifest, tracker: StageTracker) -> int:
    source = (FixtureSceneSource.from_directory(args.scenes) if args.scenes
              else SyntheticSceneSource(cfg.scene, workers=cfg.train.workers or None))
    manifest.source = source.describe()
    tracker.start_stage("train")
    try:
        ckpt, log = train(cfg.train, source, cfg.head)
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            path = save_checkpoint(exc.last_good, args.out / "last_good_checkpoint.json")
            manifest.add_artifact("last_good_checkpoint", path, args.out)
        if exc.log is not None:
            path = exc.log.to_csv(args.out / "train_log.csv")
            manifest.add_artifact("train_log", path, args.out)
        tracker.end_stage("train", status="FAILED", error_message=str(exc))
        raise
    manifest.add_artifact("checkpoint", save_checkpoint(ckpt, args.out / "checkpoint.json"), args.out)
    manifest.add_artifact("train_log", log.to_csv(args.out / "train_log.csv"), args.out)
    tracker.end_stage("train", metadata={"steps": len(log), "parameters": ckpt.num_parameters,
                                         "final_total": log.records[-1]["total"]})
    return EXIT_OK


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def cmd_analyze(args, cfg: ExperimentConfig, manifest: RunManifest, tracker: StageTracker) -> int:
    if args.reports is None:
        reports = list(cfg.analysis.reports)
        if not args.curve_logs and "losscurves" in reports:
            logger.info("Skipping losscurves: no --curve-logs given")
            reports.remove("losscurves")
    else:
        reports = [r.strip() for r in args.reports.split(",") if r.strip()]
    unknown = [r for r in reports if r not in ANALYSIS_REPORTS]
    if unknown:
        raise UsageError(f"unknown report(s) {unknown}; choose from {list(ANALYSIS_REPORTS)}")
    if "losscurves" in reports and not args.curve_logs:
        raise UsageError("the losscurves report needs --curve-logs REFERENCE CANDIDATE")
    out = args.out
    if not reports:
        logger.warning("No reports selected; writing the manifest only")
        return EXIT_OK

    needs_eval = any(r in reports for r in ("pcc", "scatter", "suppression"))
    report: Optional[EvalReport] = None
    if needs_eval:
        ckpt = load_checkpoint(args.checkpoint)
        scene_cfg = ckpt.scene_config
        if args.seed is not None:
            scene_cfg = replace(scene_cfg, seed=args.seed)
        if args.scenes:
            if args.seed is not None:
                logger.warning("--seed has no effect on fixture scenes from %s", args.scenes)
            scenes = FixtureSceneSource.from_directory(args.scenes).all()
        else:
            scenes = eval_scenes(replace(cfg, scene=scene_cfg))
        tracker.start_stage("evaluate")
        report = evaluate(ckpt, scenes, cfg.nms)
        manifest.variant = report.variant
        manifest.add_artifact("eval_report", report.save(out / "eval_report.json"), out)
        tracker.end_stage("evaluate", metadata={"scenes": len(scenes), "candidates": len(report.candidates)})

    tracker.start_stage("analyze")
    if "pcc" in reports:
        res = pcc_report(report)
        path = out / "pcc.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([res.to_dict()]).to_csv(path, index=False)
        manifest.add_artifact("pcc", path, out)
    if "scatter" in reports:
        manifest.add_artifact("scatter_sharpness", sharpness_scatter(report).to_csv(out / "scatter_sharpness.csv"), out)
        if report.variant == VariantKind.GFLV2_DECOMPOSED.value:
            manifest.add_artifact("scatter_dgqp_io", dgqp_io_scatter(report).to_csv(out / "scatter_dgqp_io.csv"), out)
    if "suppression" in reports:
        a = cfg.analysis
        table = suppression_study(report, a.corruption_levels, a.study_seed,
                                  iou_threshold=cfg.nms.iou_threshold, tolerance=a.retention_tolerance)
        table.to_csv(out / "suppression.csv", index=False)
        manifest.add_artifact("suppression", out / "suppression.csv", out)
        summary = {"variant": report.variant,
                   "random_baseline": random_ranking_baseline(report, a.retention_tolerance),
                   "retention_at_zero": float(table["retention"].iloc[0])}
        if args.oracle:
            oracle = suppression_study(report, a.corruption_levels, a.study_seed, oracle=True,
                                       iou_threshold=cfg.nms.iou_threshold, tolerance=a.retention_tolerance)
            oracle.to_csv(out / "suppression_oracle.csv", index=False)
            manifest.add_artifact("suppression_oracle", out / "suppression_oracle.csv", out)
            summary["oracle_retention_at_zero"] = float(oracle["retention"].iloc[0])
        manifest.add_artifact("suppression_summary", _write_json(out / "suppression_summary.json", summary), out)
    if "losscurves" in reports:
        ref, cand = (TrainLog.from_csv(p) for p in args.curve_logs)
        cmp = loss_curve_compare(ref, cand, names=("reference", "candidate"))
        manifest.add_artifact("losscurves", cmp.to_csv(out / "losscurves.csv"), out)
        manifest.add_artifact("losscurves_summary", _write_json(out / "losscurves_summary.json", cmp.summary()), out)
    tracker.end_stage("analyze", metadata={"reports": reports})
    return EXIT_OK


def cmd_checkgrad(args, manifest: RunManifest, tracker: StageTracker) -> int:
    suites = [s.strip() for s in args.suites.split(",")] if args.suites else None
    tracker.start_stage("checkgrad")
    report = run_gradcheck(args.seed, args.trials, args.sabotage, suites)
    print(report.summary())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        report.frame().to_csv(args.out / "gradcheck.csv", index=False)
        manifest.add_artifact("gradcheck", args.out / "gradcheck.csv", args.out)
    status = "SUCCESS" if report.passed else "FAILED"
    tracker.end_stage("checkgrad", status=status, metadata={"trials": args.trials, "sabotaged": report.sabotaged})
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_compare(args, cfg: ExperimentConfig, manifest: RunManifest, tracker: StageTracker) -> int:
    tracker.start_stage("compare")
    result = compare_variants(cfg, args.seeds, workers=args.workers)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(out / "pcc_table.csv", index=False)
    manifest.add_artifact("pcc_table", out / "pcc_table.csv", out)
    for curve in result.curves:
        name = f"losscurves_seed{curve.seed}"
        manifest.add_artifact(name, curve.to_csv(out / f"{name}.csv"), out)
    summary = result.summary()
    manifest.add_artifact("summary", _write_json(out / "compare_summary.json", summary), out)
    tracker.end_stage("compare", metadata=summary)
    return EXIT_OK


# ──────────────────────────────────────────────────────────────
# Entry point
# ──────────────────────────────────────────────────────────────

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    seed = getattr(args, "seed", None)
    ctx = RunContext(command=args.command, seed=seed, variant=getattr(args, "variant", None))
    slog = StructuredLogger(__name__, "cli.log", ctx)
    tracker = StageTracker(ctx)
    out = getattr(args, "out", None)
    manifest: Optional[RunManifest] = None
    argv_list = list(sys.argv[1:] if argv is None else argv)
    code = EXIT_FAILURE
    try:
        if args.command == "checkgrad":
            manifest = RunManifest.start(ctx, None, argv_list)
            code = cmd_checkgrad(args, manifest, tracker)
        else:
            cfg = resolve_config(args)
            manifest = RunManifest.start(ctx, cfg, argv_list)
            manifest.variant = cfg.head.kind.value
            manifest.seed = cfg.train.seed
            command = {"gen": cmd_gen, "train": cmd_train, "analyze": cmd_analyze,
                       "compare": cmd_compare}[args.command]
            code = command(args, cfg, manifest, tracker)
        slog.info(f"{args.command} finished", exit_code=code)
    except ConfigError as exc:
        print(f"lqelab: error: {exc}", file=sys.stderr)
        slog.error(f"configuration error: {exc}")
        code = EXIT_USAGE
    except LqeError as exc:
        print(f"lqelab: error: {exc}", file=sys.stderr)
        slog.error(f"{args.command} failed: {exc}", error_type=type(exc).__name__)
        code = EXIT_FAILURE
    except Exception as exc:
        logger.exception(f"{args.command} failed unexpectedly")
        print(f"lqelab: unexpected error: {exc}", file=sys.stderr)
        code = EXIT_FAILURE
    finally:
        if manifest is not None and out is not None:
            manifest.stages = tracker.stages
            manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
