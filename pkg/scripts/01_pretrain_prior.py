"""
Pretrain the object priors, one per stage.

Each prior learns single complete primitives (random z-rotation and scale)
conditioned on a clean render of the object. The checkpoint is later both
the frozen base branch of the stage model and its alignment teacher.

Output:
    <runs_dir>/checkpoints/prior_{stage}.ckpt
    <runs_dir>/training_logs/prior_{stage}.csv

Usage:
    python scripts/01_pretrain_prior.py                      # all three stages
    python scripts/01_pretrain_prior.py --stage coarse --set train.pretrain_steps=500
"""

import logging
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from scenefix.checkpoint import save_checkpoint
from scenefix.cli import (
    EXIT_OK,
    UsageParser,
    add_common_args,
    checkpoint_path,
    guarded,
    run_config_from_args,
    training_log_path,
)
from scenefix.logs import configure_logging
from scenefix.run_config import STAGES
from scenefix.seeding import configure_determinism
from scenefix.training import pretrain_prior

log = logging.getLogger("pretrain")


def pretrain_stage(run_cfg, stage: str) -> Path:
    cfg = run_cfg.models.of(stage)
    prior, history = pretrain_prior(cfg, run_cfg.train, run_cfg.seed,
                                    log_path=training_log_path(run_cfg.runs_dir, "prior", stage))
    first, last = history["l_fm"].iloc[0], history["l_fm"].iloc[-1]
    log.info(f"  {stage}: l_fm {first:.5f} -> {last:.5f} over {len(history)} steps")
    return save_checkpoint(prior, checkpoint_path(run_cfg.runs_dir, "prior", stage),
                           extra={"seed": run_cfg.seed, "steps": len(history), "final_l_fm": float(last)})


def run(run_cfg, stages=STAGES) -> int:
    configure_determinism(run_cfg.deterministic_mode, run_cfg.seed)
    log.info("=" * 60)
    log.info("PRETRAIN OBJECT PRIORS")
    log.info("=" * 60)
    for i, stage in enumerate(stages, 1):
        log.info(f"[{i}/{len(stages)}] {stage}")
        t0 = time.time()
        path = pretrain_stage(run_cfg, stage)
        log.info(f"  OK ({time.time() - t0:.1f} s) → {path}")
    return EXIT_OK


def parse_args(argv=None):
    p = UsageParser(description="Pretrain per-stage object priors on single primitives")
    add_common_args(p)
    p.add_argument("--stage", choices=STAGES, action="append", help="Stage(s) to pretrain (default: all)")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run_cfg = run_config_from_args(args)
    configure_logging("pretrain")
    return run(run_cfg, tuple(args.stage) if args.stage else STAGES)


if __name__ == "__main__":
    sys.exit(guarded(main))
