"""
Complete every scene of a split in place.

Loads the three stage checkpoints, runs coarse -> fine -> texture for each
instance visible in the input view and writes per scene:

    <runs_dir>/inference/<scene_id>/scene.obj      colored voxel cubes
    <runs_dir>/inference/<scene_id>/report.json    boxes, fallback flags, stage timings
    <runs_dir>/inference/<scene_id>/assets.npz     grids and boxes for eval / export

Usage:
    python scripts/03_infer_scenes.py
    python scripts/03_infer_scenes.py --split val --steps 10 --cfg-scale 3 --alpha 0.5
"""

import logging
import sys
import time
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
    positive_int,
    run_config_from_args,
)
from scenefix.completion_pipeline import StageModels, complete_scene, save_completed_scene
from scenefix.errors import EmptyScene
from scenefix.logs import configure_logging
from scenefix.seeding import child_seed, configure_determinism

log = logging.getLogger("infer")


def run(run_cfg, split: str = "test", models: StageModels | None = None, scenes=None) -> int:
    configure_determinism(run_cfg.deterministic_mode, run_cfg.seed)
    settings = run_cfg.inference.model_copy(update={"workers": run_cfg.workers})
    log.info("=" * 60)
    log.info(f"INFER SCENES: split={split}")
    log.info("=" * 60)
    log.info(f"  steps={settings.steps}  cfg={settings.cfg_scale}  alpha={settings.alpha}  "
             f"c2f={'on' if settings.c2f else 'off'}  view={settings.view}")

    models = models or load_stage_models(run_cfg.runs_dir, run_cfg.inference.c2f)
    scenes = scenes if scenes is not None else load_split(run_cfg.dataset_root, split)
    out_root = inference_dir(run_cfg.runs_dir)
    results = {}
    t0_all = time.time()

    for i, sample in enumerate(scenes, 1):
        t0 = time.time()
        try:
            scene = complete_scene(sample, models, settings, child_seed(run_cfg.seed, "infer", sample.scene_id))
            save_completed_scene(scene, out_root / sample.scene_id)
            fallbacks = sum(a.fallback for a in scene.assets)
            results[sample.scene_id] = (f"OK ({len(scene.assets)} assets, {fallbacks} fallback, "
                                        f"{time.time() - t0:.1f} s)")
        except EmptyScene as e:
            results[sample.scene_id] = f"FAILED: {e}"
        log.info(f"  [{i}/{len(scenes)}] {sample.scene_id}: {results[sample.scene_id]}")

    log.info("=" * 60)
    log.info(f"INFERENCE SUMMARY  ({(time.time() - t0_all) / 60:.1f} min)")
    log.info("=" * 60)
    for scene_id, result in results.items():
        log.info(f"  {scene_id:<20} {result}")
    log.info("=" * 60)
    failed = sum(r.startswith("FAILED") for r in results.values())
    return EXIT_RUNTIME if scenes and failed == len(scenes) else EXIT_OK


def parse_args(argv=None):
    p = UsageParser(description="Run in-place completion on a dataset split")
    add_common_args(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--steps", type=positive_int, help="Sampling steps (default 25)")
    p.add_argument("--cfg-scale", type=float, help="Guidance scale (default 5)")
    p.add_argument("--alpha", type=float, help="Depth mixing of the input view (default 1.0)")
    p.add_argument("--no-c2f", action="store_true", help="Single-stage completion inside B_exp")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    extra = []
    if args.steps is not None:
        extra.append(f"inference.steps={args.steps}")
    if args.cfg_scale is not None:
        extra.append(f"inference.cfg_scale={args.cfg_scale}")
    if args.alpha is not None:
        extra.append(f"inference.alpha={args.alpha}")
    if args.no_c2f:
        extra.append("inference.c2f=false")
    run_cfg = run_config_from_args(args, extra)
    configure_logging("infer")
    return run(run_cfg, args.split)


if __name__ == "__main__":
    sys.exit(guarded(main))
