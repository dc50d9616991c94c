"""
In-place completion of every visible instance of one view.

Per instance: the visible fragment bounds a conservative cube B_exp, the coarse
model generates a low-resolution shape inside it only to read off the complete
box B_full, the fine model regenerates the shape at full resolution inside the
cube of B_full, and the texture model colors its voxels. Assets come back in
world coordinates purely through the stage frames; nothing here fits a pose.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from scenefix.condition import build_condition, collate_bundles, null_bundle
from scenefix.errors import ContractViolation, EmptyGeometry, EmptyScene
from scenefix.flow_model import StageModel, latent_to_occupancy, latent_to_rgb, sample
from scenefix.geom_core import (
    AABB,
    EPS_MIN_SIDE,
    OCCUPANCY_THRESHOLD,
    CubeFrame,
    OccGrid,
    PointCloud,
    backproject_depth,
    compute_aabb,
    expand_bound,
    grid_to_pointcloud,
    tight_box_of_grid,
    voxel_indices,
)
from scenefix.seeding import child_rng, child_seed, torch_generator
from scenefix.view_decomp import (
    MIN_FRAGMENT_PIXELS,
    Fragment,
    estimated_depth,
    extract_fragment,
    grid_visibility_ratio,
    mix_depth,
)

log = logging.getLogger("scenefix.complete")

FALLBACK_SCALE = 1.2
UNTEXTURED_GRAY = 0.5


class InferenceSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(25, ge=1)
    cfg_scale: float = Field(5.0, ge=0.0)
    alpha: float = Field(1.0, ge=0.0, le=1.0)        # depth mixing of the input view
    ratio_alpha: float = Field(1.0, ge=0.0, le=1.0)  # value fed to the depth-ratio embedding
    severity: float = Field(0.1, ge=0.0)
    profile: str = "balanced"
    view: int = Field(0, ge=0)
    c2f: bool = True
    expand_factor: float = Field(4.0, gt=0.0)
    threshold: float = Field(OCCUPANCY_THRESHOLD, gt=0.0, lt=1.0)
    workers: int = Field(1, ge=1)
    keep_background: bool = True
    min_pixels: int = Field(MIN_FRAGMENT_PIXELS, ge=1)  # smallest mask that counts as visible


@dataclass(frozen=True, eq=False)
class StageModels:
    fine: StageModel
    texture: StageModel
    coarse: StageModel | None = None

    def __post_init__(self):
        for name in ("coarse", "fine", "texture"):
            model = getattr(self, name)
            if model is not None and model.cfg.stage != name:
                raise ContractViolation(f"{name} slot holds a {model.cfg.stage} model")


@dataclass(frozen=True, eq=False)
class CoarseResult:
    grid: OccGrid
    b_vis: AABB
    b_exp: AABB
    b_full: AABB
    fallback: bool


@dataclass(frozen=True, eq=False)
class CompletedAsset:
    instance_id: int
    fine_grid: OccGrid
    b_vis: AABB
    b_exp: AABB
    b_full: AABB
    world_points: PointCloud
    fallback: bool = False
    fragment_recall: float = 0.0
    visibility: float = 0.0
    timings: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class CompletedScene:
    scene_id: str
    view: int
    assets: list
    background: PointCloud | None = None
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [a.instance_id for a in self.assets]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate asset ids {ids}")

    @property
    def instance_ids(self) -> list[int]:
        return [a.instance_id for a in self.assets]

    def asset(self, instance_id: int) -> CompletedAsset:
        for a in self.assets:
            if a.instance_id == instance_id:
                return a
        raise KeyError(instance_id)


# ─────────────────────────────────────────────────────────────
# Stage runners
# ─────────────────────────────────────────────────────────────

def _generate(model: StageModel, fragment: Fragment, frame: CubeFrame, settings: InferenceSettings,
              generator: torch.Generator, visibility: float | None = None,
              structure: np.ndarray | None = None) -> torch.Tensor:
    encoders = model.encoders
    stage = model.cfg.stage
    with torch.no_grad():
        bundle = build_condition(fragment, stage, frame, encoders, settings.ratio_alpha, visibility)
        cond = collate_bundles([bundle], model.cfg.ratio_dim)
        null = collate_bundles([null_bundle(stage, frame, encoders)], model.cfg.ratio_dim)
        dtype = next(model.parameters()).dtype
        s = None if structure is None else torch.as_tensor(structure, dtype=dtype)[None]
        return sample(model, cond, null, steps=settings.steps, cfg_scale=settings.cfg_scale,
                      generator=generator, structure=s)


def _occupancy_grid(z: torch.Tensor, frame: CubeFrame) -> OccGrid:
    return OccGrid(frame, latent_to_occupancy(z)[0, 0].detach().cpu().numpy())


def fallback_box(b_vis: AABB) -> AABB:
    box = b_vis.scaled(FALLBACK_SCALE)
    if box.max_side < EPS_MIN_SIDE:
        box = box.dilate(EPS_MIN_SIDE / 2.0)
    return box


def coarse_complete(fragment: Fragment, model: StageModel, settings: InferenceSettings,
                    generator: torch.Generator) -> CoarseResult:
    """Coarse grid in B_exp and the complete box B_full read off from it."""
    if fragment.points.is_empty:
        raise EmptyGeometry(f"instance {fragment.instance_id}: empty fragment")
    b_vis = compute_aabb(fragment.points)
    b_exp = expand_bound(b_vis, settings.expand_factor)
    frame = CubeFrame(b_exp, model.cfg.resolution)
    grid = _occupancy_grid(_generate(model, fragment, frame, settings, generator), frame)
    try:
        return CoarseResult(grid, b_vis, b_exp, tight_box_of_grid(grid, settings.threshold), False)
    except EmptyGeometry:
        log.warning(f"  instance {fragment.instance_id}: empty coarse generation, falling back to "
                    f"{FALLBACK_SCALE}x visible box")
        return CoarseResult(grid, b_vis, b_exp, fallback_box(b_vis), True)


def fine_refine(fragment: Fragment, b_full: AABB, model: StageModel, settings: InferenceSettings,
                generator: torch.Generator) -> OccGrid:
    """Full-resolution shape inside the cube of ``b_full``."""
    if not b_full.max_side > 0.0:
        raise ContractViolation("b_full has no extent")
    frame = CubeFrame.around(b_full, model.cfg.resolution)
    return _occupancy_grid(_generate(model, fragment, frame, settings, generator), frame)


def texture_asset(fine_grid: OccGrid, fragment: Fragment, model: StageModel,
                  settings: InferenceSettings, generator: torch.Generator) -> tuple[OccGrid, float]:
    """Per-voxel colors of the occupied voxels, and the visibility ratio used."""
    occupied = fine_grid.binary(settings.threshold)
    if not occupied.any():
        raise EmptyGeometry(f"instance {fragment.instance_id}: nothing to texture")
    if model.cfg.resolution != fine_grid.frame.resolution:
        raise ContractViolation("texture and fine resolutions differ")
    visibility = grid_visibility_ratio(fine_grid, fragment.camera, fragment.depth)
    z = _generate(model, fragment, fine_grid.frame, settings, generator,
                  visibility=visibility, structure=occupied.astype(np.float32))
    rgb = latent_to_rgb(z)[0].detach().cpu().numpy()
    rgb = np.moveaxis(rgb, 0, -1) * occupied[..., None]
    return fine_grid.with_rgb(rgb), visibility


def fragment_recall(grid: OccGrid, fragment: Fragment, threshold: float = OCCUPANCY_THRESHOLD) -> float:
    """Share of the fragment's voxels (in the grid's frame) that the grid occupies."""
    idx, _ = voxel_indices(fragment.points, grid.frame)
    if len(idx) == 0:
        return 0.0
    idx = np.unique(idx, axis=0)
    return float(grid.binary(threshold)[idx[:, 0], idx[:, 1], idx[:, 2]].mean())


# ─────────────────────────────────────────────────────────────
# Per instance and per scene
# ─────────────────────────────────────────────────────────────

def complete_instance(fragment: Fragment, models: StageModels, settings: InferenceSettings,
                      seed: int) -> CompletedAsset:
    """coarse → fine → texture for one fragment, on streams derived from ``seed``."""
    iid = fragment.instance_id
    timings = {}

    t0 = time.time()
    if settings.c2f:
        if models.coarse is None:
            raise ContractViolation("coarse-to-fine completion needs a coarse model")
        coarse = coarse_complete(fragment, models.coarse, settings,
                                 torch_generator(child_seed(seed, "coarse")))
        b_vis, b_exp, b_full, fallback = coarse.b_vis, coarse.b_exp, coarse.b_full, coarse.fallback
    else:
        b_vis = compute_aabb(fragment.points)
        b_exp = expand_bound(b_vis, settings.expand_factor)
        b_full, fallback = b_exp, False
    timings["coarse"] = round(time.time() - t0, 4)

    t0 = time.time()
    fine = fine_refine(fragment, b_full, models.fine, settings, torch_generator(child_seed(seed, "fine")))
    timings["fine"] = round(time.time() - t0, 4)

    t0 = time.time()
    visibility = 0.0
    if fine.binary(settings.threshold).any():
        fine, visibility = texture_asset(fine, fragment, models.texture, settings,
                                         torch_generator(child_seed(seed, "texture")))
    else:
        log.warning(f"  instance {iid}: empty fine grid, left untextured")
    timings["texture"] = round(time.time() - t0, 4)

    return CompletedAsset(
        instance_id=iid,
        fine_grid=fine,
        b_vis=b_vis,
        b_exp=b_exp,
        b_full=b_full,
        world_points=grid_to_pointcloud(fine, settings.threshold),
        fallback=fallback,
        fragment_recall=fragment_recall(fine, fragment, settings.threshold),
        visibility=visibility,
        timings=timings,
    )


def scene_fragments(sample, settings: InferenceSettings, seed: int, instance_ids=None) -> list[Fragment]:
    """
    Fragments of the instances visible in the input view, in id order.

    Instances covering fewer than ``settings.min_pixels`` pixels are skipped.
    """
    view = settings.view
    if not 0 <= view < sample.n_views:
        raise ContractViolation(f"view {view} out of range for {sample.n_views} views")
    d_est = estimated_depth(sample, view, child_rng(seed, "estimator", view), settings.severity, settings.profile)
    ids, counts = np.unique(sample.instids[view], return_counts=True)
    visible = {int(i) for i, n in zip(ids, counts) if i != 0 and n >= settings.min_pixels}
    slivers = sorted(int(i) for i, n in zip(ids, counts) if i != 0 and n < settings.min_pixels)
    if slivers:
        log.debug(f"  {sample.scene_id} view {view}: skipping instances {slivers} "
                  f"below {settings.min_pixels} pixels")
    wanted = sorted(visible if instance_ids is None else visible & set(instance_ids))
    rng = child_rng(seed, "fragments")
    return [extract_fragment(sample, view, iid, settings.alpha, rng, d_est=d_est,
                             min_pixels=settings.min_pixels) for iid in wanted]


def scene_background(sample, settings: InferenceSettings, seed: int) -> PointCloud:
    view = settings.view
    d_est = estimated_depth(sample, view, child_rng(seed, "estimator", view), settings.severity, settings.profile)
    depth = mix_depth(sample.depths[view], d_est, settings.alpha)
    mask = (sample.instids[view] == 0) & (depth > 0)
    return backproject_depth(depth, mask, sample.cameras[view])


def complete_scene(sample, models: StageModels, settings: InferenceSettings, seed: int,
                   instance_ids=None) -> CompletedScene:
    """
    Complete every instance visible in ``settings.view``.

    Each instance draws from its own stream ``(seed, "instance", id)`` so the
    result for an instance does not depend on which others are completed or
    on the worker count. Per-instance failures are logged and recorded.
    """
    fragments = scene_fragments(sample, settings, seed, instance_ids)
    if not fragments:
        raise EmptyScene(f"{sample.scene_id}: no visible instance in view {settings.view}")

    def work(fragment):
        return complete_instance(fragment, models, settings, child_seed(seed, "instance", fragment.instance_id))

    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        futures = [(f.instance_id, pool.submit(work, f)) for f in fragments]
        assets, failures = [], {}
        for iid, future in futures:
            try:
                assets.append(future.result())
            except (EmptyGeometry, ContractViolation) as e:
                log.error(f"  {sample.scene_id} instance {iid}: FAILED: {e}")
                failures[iid] = str(e)

    if not assets:
        raise EmptyScene(f"{sample.scene_id}: every instance failed")
    background = scene_background(sample, settings, seed) if settings.keep_background else None
    return CompletedScene(sample.scene_id, settings.view, assets, background, failures)


# ─────────────────────────────────────────────────────────────
# Export and persistence
# ─────────────────────────────────────────────────────────────

CUBE_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)
CUBE_TRIANGLES = np.array([
    [0, 2, 1], [0, 3, 2],       # z-
    [4, 5, 6], [4, 6, 7],       # z+
    [0, 1, 5], [0, 5, 4],       # y-
    [3, 7, 6], [3, 6, 2],       # y+
    [0, 4, 7], [0, 7, 3],       # x-
    [1, 2, 6], [1, 6, 5],       # x+
], dtype=np.int64)


def obj_lines(scene: CompletedScene, threshold: float = OCCUPANCY_THRESHOLD) -> list[str]:
    lines = [f"# scene {scene.scene_id} view {scene.view}"]
    base = 1
    for asset in sorted(scene.assets, key=lambda a: a.instance_id):
        grid = asset.fine_grid
        idx = grid.occupied_indices(threshold)
        if len(idx) == 0:
            continue
        lines.append(f"o instance_{asset.instance_id}")
        for cell in idx:
            corners = grid.frame.cell_face(cell[None, :] + CUBE_CORNERS)
            color = grid.rgb[tuple(cell)] if grid.rgb is not None else np.full(3, UNTEXTURED_GRAY)
            rgb = " ".join(f"{c:.4f}" for c in color)
            lines.extend(f"v {x:.6f} {y:.6f} {z:.6f} {rgb}" for x, y, z in corners)
            for tri in CUBE_TRIANGLES + base:
                lines.append(f"f {tri[0]} {tri[1]} {tri[2]}")
            base += 8
    return lines


def export_obj(scene: CompletedScene, path, threshold: float = OCCUPANCY_THRESHOLD) -> Path:
    """One colored cube per occupied voxel, grouped by instance."""
    if not any(a.fine_grid.binary(threshold).any() for a in scene.assets):
        raise EmptyScene(f"{scene.scene_id}: nothing to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(("\n".join(obj_lines(scene, threshold)) + "\n").encode("utf-8"))
    return path


def scene_report(scene: CompletedScene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "view": scene.view,
        "instances": [
            {
                "instance_id": a.instance_id,
                "fallback": a.fallback,
                "fragment_recall": a.fragment_recall,
                "visibility": a.visibility,
                "occupied_voxels": int(a.fine_grid.binary().sum()),
                "b_vis": a.b_vis.to_list(),
                "b_exp": a.b_exp.to_list(),
                "b_full": a.b_full.to_list(),
                "seconds": a.timings,
            }
            for a in scene.assets
        ],
        "failures": {str(k): v for k, v in scene.failures.items()},
    }


def save_completed_scene(scene: CompletedScene, out_dir) -> Path:
    """Write scene.obj, report.json and assets.npz under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"instance_ids": np.array(scene.instance_ids, dtype=np.int64)}
    for a in scene.assets:
        key = f"i{a.instance_id}"
        arrays[f"{key}_occupancy"] = a.fine_grid.occupancy
        if a.fine_grid.rgb is not None:
            arrays[f"{key}_rgb"] = a.fine_grid.rgb
        arrays[f"{key}_frame"] = np.concatenate([a.fine_grid.frame.world_box.min_corner,
                                                 a.fine_grid.frame.world_box.max_corner])
        arrays[f"{key}_boxes"] = np.stack([np.concatenate(b.to_list()) for b in (a.b_vis, a.b_exp, a.b_full)])
    if scene.background is not None:
        arrays["background"] = scene.background.points
    np.savez_compressed(out_dir / "assets.npz", **arrays)
    (out_dir / "report.json").write_text(json.dumps(scene_report(scene), indent=2))
    if any(a.fine_grid.binary().any() for a in scene.assets):
        export_obj(scene, out_dir / "scene.obj")
    return out_dir


def load_completed_scene(out_dir) -> CompletedScene:
    """Rebuild a CompletedScene from ``save_completed_scene`` output."""
    out_dir = Path(out_dir)
    report = json.loads((out_dir / "report.json").read_text())
    by_id = {r["instance_id"]: r for r in report["instances"]}
    assets = []
    with np.load(out_dir / "assets.npz") as data:
        for iid in data["instance_ids"].tolist():
            key = f"i{iid}"
            occ = data[f"{key}_occupancy"]
            box = data[f"{key}_frame"]
            frame = CubeFrame(AABB(box[:3], box[3:]), occ.shape[0])
            rgb = data[f"{key}_rgb"] if f"{key}_rgb" in data.files else None
            grid = OccGrid(frame, occ, rgb)
            b_vis, b_exp, b_full = (AABB(b[:3], b[3:]) for b in data[f"{key}_boxes"])
            entry = by_id.get(iid, {})
            assets.append(CompletedAsset(
                instance_id=iid, fine_grid=grid, b_vis=b_vis, b_exp=b_exp, b_full=b_full,
                world_points=grid_to_pointcloud(grid),
                fallback=bool(entry.get("fallback", False)),
                fragment_recall=float(entry.get("fragment_recall", 0.0)),
                visibility=float(entry.get("visibility", 0.0)),
                timings=entry.get("seconds", {}),
            ))
        background = PointCloud(data["background"]) if "background" in data.files else None
    failures = {int(k): v for k, v in report.get("failures", {}).items()}
    return CompletedScene(report["scene_id"], int(report["view"]), assets, background, failures)
