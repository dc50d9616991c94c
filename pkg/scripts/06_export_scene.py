"""
Re-export a completed scene as a colored voxel OBJ.

Reads the assets.npz / report.json written by 03_infer_scenes.py and writes
one cube (8 vertices, 12 triangles, per-vertex color) per occupied voxel,
grouped as ``o instance_<id>``. The output is byte-identical across runs.

Usage:
    python scripts/06_export_scene.py scene_000009
    python scripts/06_export_scene.py scene_000009 --out exports/desk.obj
"""

import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from scenefix.cli import EXIT_OK, UsageParser, add_common_args, guarded, inference_dir, run_config_from_args
from scenefix.completion_pipeline import export_obj, load_completed_scene
from scenefix.errors import DatasetLoadError
from scenefix.logs import configure_logging

log = logging.getLogger("export")


def run(run_cfg, scene_id: str, out=None) -> int:
    scene_dir = inference_dir(run_cfg.runs_dir) / scene_id
    if not (scene_dir / "assets.npz").exists():
        raise DatasetLoadError(scene_dir, "no completed scene here (run 03_infer_scenes.py first)")
    scene = load_completed_scene(scene_dir)
    out = Path(out) if out else run_cfg.reports_dir / "exports" / f"{scene_id}.obj"
    export_obj(scene, out, run_cfg.inference.threshold)
    n_vox = sum(int(a.fine_grid.binary(run_cfg.inference.threshold).sum()) for a in scene.assets)
    log.info(f"  Exported {len(scene.assets)} assets ({n_vox:,} voxels) → {out}")
    return EXIT_OK


def parse_args(argv=None):
    p = UsageParser(description="Export a completed scene to OBJ")
    add_common_args(p)
    p.add_argument("scene_id", help="Scene id, e.g. scene_000009")
    p.add_argument("--out", help="Output path (default: REPORTS_DIR/exports/<scene_id>.obj)")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    run_cfg = run_config_from_args(args)
    configure_logging("export")
    return run(run_cfg, args.scene_id, args.out)


if __name__ == "__main__":
    sys.exit(guarded(main))
