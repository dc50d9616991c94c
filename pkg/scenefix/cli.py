"""
Plumbing shared by the numbered scripts: argument parsing with the project's
exit codes, run-config loading, checkpoint locations and split loading.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from scenefix.dataset_io import read_sample, split_scene_ids
from scenefix.errors import CheckpointError, ConfigError, DatasetLoadError, ScenefixError
from scenefix.run_config import RunConfig, load_run_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

log = logging.getLogger("scenefix.cli")


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code (1) instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def add_common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="Run config JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="Override a config value by dot path (repeatable)")
    p.add_argument("--seed", type=int, help="Root seed (overrides the config)")
    p.add_argument("--workers", type=positive_int, help="Worker pool size")


def run_config_from_args(args, extra_overrides=()) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    overrides.extend(extra_overrides)
    return load_run_config(args.config, overrides)


def guarded(main_fn, argv=None) -> int:
    """Run ``main_fn(argv)`` and translate project errors into exit codes."""
    try:
        return main_fn(argv)
    except ConfigError as e:
        log.error(f"config error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ScenefixError as e:
        log.error(f"FAILED: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


# ─────────────────────────────────────────────────────────────
# Locations
# ─────────────────────────────────────────────────────────────

def checkpoint_path(runs_dir, kind: str, stage: str) -> Path:
    return Path(runs_dir) / "checkpoints" / f"{kind}_{stage}.ckpt"


def training_log_path(runs_dir, kind: str, stage: str) -> Path:
    return Path(runs_dir) / "training_logs" / f"{kind}_{stage}.csv"


def inference_dir(runs_dir) -> Path:
    return Path(runs_dir) / "inference"


def load_split(root, split: str | None) -> list:
    """Every scene of ``split`` read back from disk, in split order."""
    ids = split_scene_ids(root, split)
    if split is not None and not ids:
        raise DatasetLoadError(Path(root) / "splits.json", f"split {split!r} is empty or missing")
    return [read_sample(root, scene_id) for scene_id in ids]


def load_stage_models(runs_dir, c2f: bool = True):
    """The trained stage checkpoints needed for completion (coarse only with C2F)."""
    from scenefix.checkpoint import load_checkpoint
    from scenefix.completion_pipeline import StageModels

    stages = ("coarse", "fine", "texture") if c2f else ("fine", "texture")
    models = {}
    for stage in stages:
        path = checkpoint_path(runs_dir, "stage", stage)
        if not path.exists():
            raise CheckpointError(f"missing {stage} checkpoint at {path}")
        models[stage], _ = load_checkpoint(path, expected_stage=stage, expected_kind="stage")
    return StageModels(**models)
