"""
Forge the synthetic desk-scene dataset.

Scenes use seeds seed .. seed + N - 1 and are written under DATASET_ROOT, one
directory per scene, together with:

    <root>/splits.json               train / val / test by seed modulus
    <root>/dataset_inventory.csv     one row per scene (counts, occlusion stats)

Seeds that cannot place enough instances are reported; the command fails
(exit 2) when more than 20 % of them do.

Usage:
    python scripts/00_forge_dataset.py --scenes 50 --seed 1
    python scripts/00_forge_dataset.py --scenes 200 --workers 8 --set forge.width=96
"""

import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pandas as pd
from tqdm import tqdm

from config import SPLIT_BUCKETS, SPLIT_MODULUS
from scenefix.cli import EXIT_OK, EXIT_RUNTIME, UsageParser, add_common_args, guarded, positive_int, run_config_from_args
from scenefix.dataset_io import forge_to_disk, write_splits
from scenefix.errors import ForgeFailure
from scenefix.logs import configure_logging
from scenefix.scene_forge import scene_id_for_seed

log = logging.getLogger("forge")

MAX_FAILURE_SHARE = 0.2


# ─────────────────────────────────────────────────────────────
# Forging
# ─────────────────────────────────────────────────────────────

def forge_dataset(run_cfg, scenes: int) -> tuple[pd.DataFrame, dict]:
    """Forge ``scenes`` scenes; returns the inventory and {seed: failure text}."""
    root = run_cfg.dataset_root
    root.mkdir(parents=True, exist_ok=True)
    seeds = list(range(run_cfg.seed, run_cfg.seed + scenes))
    rows, failures = {}, {}

    def collect(seed, fn):
        try:
            rows[seed] = fn()
        except ForgeFailure as e:
            failures[seed] = str(e)
            log.warning(f"  seed {seed}: FAILED: {e}")

    if run_cfg.workers == 1:
        for seed in tqdm(seeds, desc="forge", leave=False):
            collect(seed, lambda s=seed: forge_to_disk(run_cfg.forge, s, root))
    else:
        with ProcessPoolExecutor(max_workers=run_cfg.workers) as pool:
            futures = {seed: pool.submit(forge_to_disk, run_cfg.forge, seed, root) for seed in seeds}
            for seed in tqdm(seeds, desc="forge", leave=False):
                collect(seed, futures[seed].result)

    inventory = pd.DataFrame([rows[s] for s in sorted(rows)])
    write_splits(root, {scene_id_for_seed(s): s for s in rows}, SPLIT_MODULUS, SPLIT_BUCKETS)
    inventory.to_csv(root / "dataset_inventory.csv", index=False)
    return inventory, failures


def run(run_cfg, scenes: int) -> int:
    log.info("=" * 60)
    log.info("FORGE DATASET")
    log.info("=" * 60)
    log.info(f"  Root   : {run_cfg.dataset_root}")
    log.info(f"  Seeds  : {run_cfg.seed} .. {run_cfg.seed + scenes - 1}")
    log.info(f"  Workers: {run_cfg.workers}")

    t0 = time.time()
    inventory, failures = forge_dataset(run_cfg, scenes)
    elapsed = time.time() - t0

    log.info("=" * 60)
    log.info(f"FORGE SUMMARY  ({elapsed:.1f} s)")
    log.info("=" * 60)
    log.info(f"  Forged  : {len(inventory)}")
    log.info(f"  Failed  : {len(failures)}")
    if len(inventory):
        log.info(f"  Instances per scene : {inventory['instances'].mean():.2f}")
        log.info(f"  Mean visible frac.  : {inventory['mean_visible_fraction'].mean():.3f}")
        masks = inventory.filter(like="visible_view_").to_numpy().sum()
        if masks:
            log.info(f"  Masks >1 component  : {inventory['masks_gt1_components'].sum() / masks:.1%}")
            log.info(f"  Masks >4 components : {inventory['masks_gt4_components'].sum() / masks:.1%}")
    for seed, err in sorted(failures.items()):
        log.info(f"  seed {seed:<8} FAILED: {err}")
    log.info("=" * 60)

    if len(failures) > MAX_FAILURE_SHARE * scenes:
        log.error(f"  {len(failures)}/{scenes} seeds failed (more than {MAX_FAILURE_SHARE:.0%})")
        return EXIT_RUNTIME
    return EXIT_OK


# ─────────────────────────────────────────────────────────────
# CLI
# ─────────────────────────────────────────────────────────────

def parse_args(argv=None):
    p = UsageParser(description="Forge the synthetic scene dataset")
    add_common_args(p)
    p.add_argument("--scenes", type=positive_int, help="Number of scenes (default: config 'scenes')")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    extra = [f"scenes={args.scenes}"] if args.scenes is not None else []
    run_cfg = run_config_from_args(args, extra)
    configure_logging("forge")
    return run(run_cfg, run_cfg.scenes)


if __name__ == "__main__":
    sys.exit(guarded(main))
