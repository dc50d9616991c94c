"""
Train one stage model on the forged training split.

The stage model starts from the stage's pretrained prior (frozen base branch,
trainable control branch) and minimizes L_FM + lambda * L_AL, where the
alignment term is measured against a frozen copy of the prior fed clean crops.
Both loss components are logged per step.

Output:
    <runs_dir>/checkpoints/stage_{stage}.ckpt
    <runs_dir>/training_logs/stage_{stage}.csv

Usage:
    python scripts/02_train_stage.py --stage coarse
    python scripts/02_train_stage.py --stage fine --no-orfa
"""

import logging
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from scenefix.checkpoint import load_checkpoint, save_checkpoint
from scenefix.cli import (
    EXIT_OK,
    UsageParser,
    add_common_args,
    checkpoint_path,
    guarded,
    load_split,
    run_config_from_args,
    training_log_path,
)
from scenefix.errors import CheckpointError
from scenefix.logs import configure_logging
from scenefix.run_config import STAGES
from scenefix.seeding import configure_determinism
from scenefix.training import train_stage

log = logging.getLogger("train")


def load_prior(run_cfg, stage: str):
    path = checkpoint_path(run_cfg.runs_dir, "prior", stage)
    if not path.exists():
        raise CheckpointError(f"missing teacher: no pretrained {stage} prior at {path} "
                              f"(run scripts/01_pretrain_prior.py first)")
    prior, _ = load_checkpoint(path, expected_stage=stage, expected_kind="prior")
    return prior


def run(run_cfg, stage: str, scenes=None) -> int:
    configure_determinism(run_cfg.deterministic_mode, run_cfg.seed)
    cfg = run_cfg.models.of(stage)
    log.info("=" * 60)
    log.info(f"TRAIN STAGE: {stage}")
    log.info("=" * 60)
    log.info(f"  steps={run_cfg.train.steps}  lambda={run_cfg.train.lambdas.get(stage, 0.0)}  "
             f"orfa={'on' if run_cfg.train.use_orfa else 'off'}  K={cfg.control_depth}")

    prior = load_prior(run_cfg, stage)
    if scenes is None:
        scenes = load_split(run_cfg.dataset_root, "train")
    log.info(f"  Training scenes: {len(scenes)}")

    t0 = time.time()
    model, history = train_stage(prior, cfg, run_cfg.train, scenes, run_cfg.seed,
                                 log_path=training_log_path(run_cfg.runs_dir, "stage", stage))
    last = history.iloc[-1]
    path = save_checkpoint(model, checkpoint_path(run_cfg.runs_dir, "stage", stage),
                           extra={"seed": run_cfg.seed, "steps": len(history),
                                  "use_orfa": run_cfg.train.use_orfa, "final_l_fm": float(last["l_fm"])})
    log.info(f"  OK ({time.time() - t0:.1f} s): l_fm {history['l_fm'].iloc[0]:.5f} -> {last['l_fm']:.5f} → {path}")
    return EXIT_OK


def parse_args(argv=None):
    p = UsageParser(description="Train a dual-branch stage model")
    add_common_args(p)
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--no-orfa", action="store_true", help="Drop the feature-alignment loss")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run_cfg = run_config_from_args(args, ["train.use_orfa=false"] if args.no_orfa else [])
    configure_logging("train")
    return run(run_cfg, args.stage)


if __name__ == "__main__":
    sys.exit(guarded(main))
