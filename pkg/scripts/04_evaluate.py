"""
Evaluate completed scenes against the forged ground truth.

Modes:
    default         inferred scenes of the split vs ground truth
    --identity      ground truth against itself (must give cd 0 / fs 100 / iou 1)
    --sweep A ...   robustness sweep over depth-mixing alphas (needs checkpoints)
    --containment   share of ground-truth boxes inside the expanded visible box

Output (under REPORTS_DIR):
    evaluation.csv                one row per scene + SUMMARY row
    evaluation_instances.json     per-instance detail and missing ids
    robustness.csv                one row per alpha (--sweep)
    containment.csv               one row per visible instance (--containment)

Usage:
    python scripts/04_evaluate.py
    python scripts/04_evaluate.py --identity
    python scripts/04_evaluate.py --sweep 0.2 0.6 1.0 --severity 0.1
    python scripts/04_evaluate.py --containment --split test
"""

import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from scenefix.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    UsageParser,
    add_common_args,
    guarded,
    inference_dir,
    load_split,
    load_stage_models,
    run_config_from_args,
)
from scenefix.completion_pipeline import load_completed_scene
from scenefix.errors import DatasetLoadError, EmptyScene
from scenefix.eval_metrics import (
    boundary_containment,
    evaluate_scene,
    reference_scene,
    robustness_sweep,
    write_evaluation,
)
from scenefix.logs import configure_logging
from scenefix.seeding import configure_determinism

log = logging.getLogger("eval")


def evaluate_split(run_cfg, scenes, identity: bool = False, pred_root=None):
    """EvalReports of ``scenes`` and {scene_id: failure text}."""
    pred_root = Path(pred_root) if pred_root is not None else inference_dir(run_cfg.runs_dir)
    reports, failures = [], {}
    for i, gt in enumerate(scenes, 1):
        try:
            if identity:
                pred = reference_scene(gt)
            else:
                scene_dir = pred_root / gt.scene_id
                if not (scene_dir / "report.json").exists():
                    raise DatasetLoadError(scene_dir, "no inference output for this scene")
                pred = load_completed_scene(scene_dir)
            report = evaluate_scene(pred, gt, run_cfg.metrics)
            reports.append(report)
            log.info(f"  [{i}/{len(scenes)}] {gt.scene_id}: cd_o={report.cd_object:.4f}  "
                     f"fs_o={report.fs_object:.2f}  iou={report.bbox_iou:.3f}  missing={report.missing}")
        except (EmptyScene, DatasetLoadError) as e:
            failures[gt.scene_id] = str(e)
            log.error(f"  [{i}/{len(scenes)}] {gt.scene_id}: FAILED: {e}")
    return reports, failures


def run(run_cfg, split: str = "test", identity: bool = False, sweep=None, severity: float = 0.1,
        containment: bool = False) -> int:
    configure_determinism(run_cfg.deterministic_mode, run_cfg.seed)
    scenes = load_split(run_cfg.dataset_root, split)
    out = run_cfg.reports_dir
    out.mkdir(parents=True, exist_ok=True)
    log.info("=" * 60)
    log.info(f"EVALUATE: split={split} ({len(scenes)} scenes)")
    log.info("=" * 60)

    if containment:
        table = boundary_containment(scenes, alpha=0.0, expand_factor=run_cfg.inference.expand_factor,
                                     seed=run_cfg.seed, min_pixels=run_cfg.inference.min_pixels)
        table.to_csv(out / "containment.csv", index=False)
        share = float(table["contained"].mean()) if len(table) else float("nan")
        log.info(f"  gt_box inside B_exp: {share:.1%} of {len(table)} instances")
        return EXIT_OK

    if sweep:
        models = load_stage_models(run_cfg.runs_dir, run_cfg.inference.c2f)
        settings = run_cfg.inference.model_copy(update={"workers": run_cfg.workers})
        table = robustness_sweep(scenes, models, sweep, severity, settings, run_cfg.metrics, run_cfg.seed)
        table.to_csv(out / "robustness.csv", index=False)
        for row in table.itertuples(index=False):
            log.info(f"  alpha={row.alpha:<5} cd_o={row.cd_object:.4f}  fs_o={row.fs_object:.2f}")
        return EXIT_OK

    reports, failures = evaluate_split(run_cfg, scenes, identity=identity)
    table = write_evaluation(reports, out, failures)
    log.info("=" * 60)
    log.info("EVALUATION SUMMARY")
    log.info("=" * 60)
    if len(table):
        s = table.iloc[-1]
        log.info(f"  CD_S {s['cd_scene']:.4f}   FS_S {s['fs_scene']:.2f}   CD_O {s['cd_object']:.4f}   "
                 f"FS_O {s['fs_object']:.2f}   IoU {s['bbox_iou']:.3f}")
    log.info(f"  Evaluated: {len(reports)}   Failed: {len(failures)}")
    log.info("=" * 60)
    return EXIT_OK if reports else EXIT_RUNTIME


def parse_args(argv=None):
    p = UsageParser(description="Evaluate completed scenes (CD / F-score / box IoU)")
    add_common_args(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--identity", action="store_true", help="Evaluate ground truth against itself")
    p.add_argument("--sweep", nargs="+", type=float, metavar="ALPHA", help="Robustness sweep alphas")
    p.add_argument("--severity", type=float, default=0.1, help="Estimator surrogate severity for --sweep")
    p.add_argument("--containment", action="store_true", help="Measure gt_box ⊆ B_exp containment")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run_cfg = run_config_from_args(args)
    configure_logging("eval")
    return run(run_cfg, args.split, identity=args.identity, sweep=args.sweep,
               severity=args.severity, containment=args.containment)


if __name__ == "__main__":
    sys.exit(guarded(main))
