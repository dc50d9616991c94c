"""
Ablation table over the design axes of the completion model.

Arms (pick with ablation.arms or --arm):
    full          reference configuration
    c2f_off       single-stage completion: the fine model works directly in B_exp
    al_off        no feature-alignment loss
    k2, k6        control branch with 2 / 6 copied blocks (reference: 4)
    ratio_off     no depth-ratio embedding
    global_off    no global-geometry cross-attention
    single_depth  one depth-estimator profile instead of mixed sources
    unfreeze      base branch trained as well

Every arm reuses the pretrained priors of the main run (pretraining them first
when absent), trains its own stage models under <runs_dir>/ablation/<arm>/,
completes the test split and is evaluated there.

Output:
    REPORTS_DIR/ablation.csv     one row per arm

Usage:
    python scripts/05_ablate.py
    python scripts/05_ablate.py --arm full --arm al_off --set train.steps=200
"""

import logging
import math
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pandas as pd

from scenefix.checkpoint import load_checkpoint, save_checkpoint
from scenefix.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    UsageParser,
    add_common_args,
    checkpoint_path,
    guarded,
    load_split,
    run_config_from_args,
    training_log_path,
)
from scenefix.completion_pipeline import StageModels, complete_scene
from scenefix.errors import EmptyScene, ScenefixError
from scenefix.eval_metrics import METRIC_COLUMNS, evaluate_scene, evaluation_table
from scenefix.logs import configure_logging
from scenefix.run_config import ABLATION_ARMS, STAGES, arm_config
from scenefix.seeding import child_seed, configure_determinism
from scenefix.training import pretrain_prior, train_stage

log = logging.getLogger("ablate")


def shared_priors(run_cfg) -> dict:
    """Priors of the main run, pretrained on the spot when missing."""
    priors = {}
    for stage in STAGES:
        path = checkpoint_path(run_cfg.runs_dir, "prior", stage)
        if path.exists():
            priors[stage], _ = load_checkpoint(path, expected_stage=stage, expected_kind="prior")
            continue
        log.info(f"  no {stage} prior at {path}, pretraining it")
        priors[stage], _ = pretrain_prior(run_cfg.models.of(stage), run_cfg.train, run_cfg.seed,
                                          log_path=training_log_path(run_cfg.runs_dir, "prior", stage))
        save_checkpoint(priors[stage], path, extra={"seed": run_cfg.seed})
    return priors


def run_arm(arm_cfg, arm: str, priors: dict, train_scenes, test_scenes) -> dict:
    arm_dir = arm_cfg.runs_dir / "ablation" / arm
    stages = STAGES if arm_cfg.inference.c2f else ("fine", "texture")
    models, l_al_finite = {}, None
    for stage in stages:
        model, history = train_stage(priors[stage], arm_cfg.models.of(stage), arm_cfg.train, train_scenes,
                                     arm_cfg.seed, log_path=training_log_path(arm_dir, "stage", stage))
        save_checkpoint(model, checkpoint_path(arm_dir, "stage", stage), extra={"arm": arm})
        models[stage] = model
        if "l_al" in history:
            finite = bool(history["l_al"].map(math.isfinite).all())
            l_al_finite = finite if l_al_finite is None else (l_al_finite and finite)

    stage_models = StageModels(**models)
    settings = arm_cfg.inference.model_copy(update={"workers": arm_cfg.workers})
    reports = []
    for sample in test_scenes:
        try:
            scene = complete_scene(sample, stage_models, settings, child_seed(arm_cfg.seed, "infer", sample.scene_id))
            reports.append(evaluate_scene(scene, sample, arm_cfg.metrics))
        except EmptyScene as e:
            log.error(f"  {arm} / {sample.scene_id}: FAILED: {e}")
    table = evaluation_table(reports)
    row = {"arm": arm, "scenes": len(reports), "l_al_finite": l_al_finite}
    if len(table):
        row.update(table.iloc[-1][METRIC_COLUMNS].to_dict())
    return row


def run(run_cfg, arms=None) -> int:
    configure_determinism(run_cfg.deterministic_mode, run_cfg.seed)
    arms = list(arms or run_cfg.ablation.arms)
    log.info("=" * 60)
    log.info(f"ABLATION: {', '.join(arms)}")
    log.info("=" * 60)

    train_scenes = load_split(run_cfg.dataset_root, "train")
    test_scenes = load_split(run_cfg.dataset_root, "test")
    priors = shared_priors(run_cfg)

    rows, results = [], {}
    for i, arm in enumerate(arms, 1):
        log.info(f"[{i}/{len(arms)}] {arm}")
        t0 = time.time()
        try:
            row = run_arm(arm_config(run_cfg, arm), arm, priors, train_scenes, test_scenes)
            rows.append(row)
            results[arm] = f"OK ({(time.time() - t0) / 60:.1f} min)"
        except ScenefixError as e:
            results[arm] = f"FAILED: {e}"
            log.error(f"  {arm}: FAILED: {e}")

    table = pd.DataFrame(rows, columns=["arm", "scenes", *METRIC_COLUMNS, "l_al_finite"])
    run_cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(run_cfg.reports_dir / "ablation.csv", index=False)

    log.info("=" * 60)
    log.info("ABLATION SUMMARY")
    log.info("=" * 60)
    for arm, result in results.items():
        log.info(f"  {arm:<14} {result}")
    log.info("-" * 60)
    for row in table.itertuples(index=False):
        log.info(f"  {row.arm:<14} CD_S {row.cd_scene:.4f}  FS_S {row.fs_scene:.2f}  "
                 f"CD_O {row.cd_object:.4f}  FS_O {row.fs_object:.2f}  IoU {row.bbox_iou:.3f}")
    log.info("=" * 60)
    return EXIT_OK if len(rows) == len(arms) else EXIT_RUNTIME


def parse_args(argv=None):
    p = UsageParser(description="Train and evaluate ablation arms")
    add_common_args(p)
    p.add_argument("--arm", choices=ABLATION_ARMS, action="append", help="Arm(s) to run (default: config)")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run_cfg = run_config_from_args(args)
    configure_logging("ablate")
    return run(run_cfg, args.arm)


if __name__ == "__main__":
    sys.exit(guarded(main))
