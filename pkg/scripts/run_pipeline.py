"""
Command dispatcher and end-to-end orchestrator.

Each subcommand forwards its remaining arguments to the matching numbered
script; ``all`` runs the whole workflow

    forge -> pretrain -> train coarse -> train fine -> train texture -> infer -> eval

and tracks step-level progress in data/pipeline_status.json so it can be
stopped and restarted at any time. Only steps marked "completed" are skipped;
pass --restart to redo everything.

Usage:
    python scripts/run_pipeline.py forge --scenes 50 --seed 1
    python scripts/run_pipeline.py train --stage fine --no-orfa
    python scripts/run_pipeline.py all --set scenes=20 --set train.steps=200

    # Preview what `all` would run
    python scripts/run_pipeline.py all --dry-run
"""

import importlib.util
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import PIPELINE_STATUS_FILE
from scenefix.cli import EXIT_OK, EXIT_RUNTIME, UsageParser, add_common_args, guarded, run_config_from_args
from scenefix.errors import ScenefixError
from scenefix.logs import configure_logging

# ─────────────────────────────────────────────────────────────
# Import functions from numbered scripts (can't use normal import)
# ─────────────────────────────────────────────────────────────

_SCRIPTS_DIR = Path(__file__).resolve().parent


def _import_script(module_name: str, filename: str):
    """Import a script file that has a numeric prefix in its name."""
    filepath = _SCRIPTS_DIR / filename
    spec = importlib.util.spec_from_file_location(module_name, filepath)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


_mod_forge = _import_script("forge_dataset", "00_forge_dataset.py")
_mod_pretrain = _import_script("pretrain_prior", "01_pretrain_prior.py")
_mod_train = _import_script("train_stage", "02_train_stage.py")
_mod_infer = _import_script("infer_scenes", "03_infer_scenes.py")
_mod_eval = _import_script("evaluate", "04_evaluate.py")
_mod_ablate = _import_script("ablate", "05_ablate.py")
_mod_export = _import_script("export_scene", "06_export_scene.py")

COMMANDS = {
    "forge": _mod_forge.main,
    "pretrain": _mod_pretrain.main,
    "train": _mod_train.main,
    "infer": _mod_infer.main,
    "eval": _mod_eval.main,
    "ablate": _mod_ablate.main,
    "export": _mod_export.main,
}

# step name -> callable(run_cfg) returning an exit code
PIPELINE_STEPS = [
    ("forge", lambda cfg: _mod_forge.run(cfg, cfg.scenes)),
    ("pretrain", lambda cfg: _mod_pretrain.run(cfg)),
    ("train_coarse", lambda cfg: _mod_train.run(cfg, "coarse")),
    ("train_fine", lambda cfg: _mod_train.run(cfg, "fine")),
    ("train_texture", lambda cfg: _mod_train.run(cfg, "texture")),
    ("infer", lambda cfg: _mod_infer.run(cfg, "test")),
    ("eval", lambda cfg: _mod_eval.run(cfg, "test")),
]

log = logging.getLogger("pipeline")


# ─────────────────────────────────────────────────────────────
# Status file helpers
# ─────────────────────────────────────────────────────────────

def _load_status(path=PIPELINE_STATUS_FILE) -> dict:
    """Load pipeline_status.json, returning {} if it doesn't exist."""
    path = Path(path)
    if path.exists():
        with open(path, "r") as f:
            return json.load(f)
    return {}


def _save_status(status: dict, path=PIPELINE_STATUS_FILE):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(status, f, indent=2)


def _mark_step(status_map: dict, step: str, path=PIPELINE_STATUS_FILE, **fields):
    """Update a step's entry in the status dict and persist."""
    status_map[step] = {**status_map.get(step, {}), **fields}
    _save_status(status_map, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ─────────────────────────────────────────────────────────────
# Orchestrator
# ─────────────────────────────────────────────────────────────

def run_all(run_cfg, dry_run: bool = False, restart: bool = False, status_file=PIPELINE_STATUS_FILE) -> int:
    status = {} if restart else _load_status(status_file)
    if restart:
        _save_status(status, status_file)
    completed = [name for name, _ in PIPELINE_STEPS if status.get(name, {}).get("status") == "completed"]
    pending = [(name, fn) for name, fn in PIPELINE_STEPS if name not in completed]

    log.info("=" * 60)
    log.info("PIPELINE ORCHESTRATOR")
    log.info("=" * 60)
    log.info(f"  Steps        : {len(PIPELINE_STEPS)}")
    log.info(f"  Completed    : {len(completed)} (will skip)")
    log.info(f"  To process   : {len(pending)}")

    if dry_run:
        log.info("-- DRY RUN -- No changes will be made.")
        for i, (name, _) in enumerate(pending, 1):
            log.info(f"  {i:2d}. {name:<15} (current status: {status.get(name, {}).get('status', 'new')})")
        return EXIT_OK

    results = {}
    t0_all = time.time()
    code = EXIT_OK
    for i, (name, fn) in enumerate(pending, 1):
        log.info("#" * 60)
        log.info(f"# [{i}/{len(pending)}] {name}")
        log.info("#" * 60)
        t0 = time.time()
        _mark_step(status, name, status_file, status="running", started_at=_now())
        try:
            step_code = fn(run_cfg)
            if step_code != EXIT_OK:
                raise ScenefixError(f"step exited with code {step_code}")
            elapsed = time.time() - t0
            _mark_step(status, name, status_file, status="completed", completed_at=_now(),
                       seconds=round(elapsed, 1))
            results[name] = f"OK ({elapsed / 60:.1f} min)"
        except ScenefixError as exc:
            _mark_step(status, name, status_file, status="failed", error=str(exc), failed_at=_now())
            results[name] = f"FAILED: {exc}"
            log.error(f"  >> {name} FAILED after {(time.time() - t0) / 60:.1f} min: {exc}")
            code = EXIT_RUNTIME
            break

    log.info("=" * 60)
    log.info(f"PIPELINE SUMMARY  ({(time.time() - t0_all) / 60:.1f} min this run)")
    log.info("=" * 60)
    for name, result in results.items():
        log.info(f"  {name:<15} {result}")
    if code != EXIT_OK:
        log.info("  Re-run this script to resume from the failed step.")
    log.info("=" * 60)
    return code


# ─────────────────────────────────────────────────────────────
# CLI
# ─────────────────────────────────────────────────────────────

def parse_args(argv=None):
    p = UsageParser(description="scenefix command dispatcher")
    p.add_argument("command", choices=[*COMMANDS, "all"])
    return p.parse_known_args(argv)


def parse_all_args(argv):
    p = UsageParser(prog="run_pipeline.py all", description="Run the whole workflow")
    add_common_args(p)
    p.add_argument("--dry-run", action="store_true", help="Show what would run without making changes")
    p.add_argument("--restart", action="store_true", help="Ignore the status file and redo every step")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args, rest = parse_args(argv)
    if args.command != "all":
        return COMMANDS[args.command](rest)
    all_args = parse_all_args(rest)
    run_cfg = run_config_from_args(all_args)
    configure_logging("pipeline")
    return run_all(run_cfg, dry_run=all_args.dry_run, restart=all_args.restart)


if __name__ == "__main__":
    sys.exit(guarded(main))
