"""
Scene- and object-level Chamfer distance, F-score and box IoU of completed
scenes against forged ground truth, plus the depth-mixing robustness sweep.

Chamfer distance here is the symmetric mean of non-squared Euclidean
nearest-neighbour distances, halved. Both metrics are computed after moving
the ground-truth scene so that the max side of the union of its instance boxes
is 1 (the same transform is applied to the prediction), which makes ``tau`` a
relative threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial import cKDTree
from tqdm import tqdm

from scenefix.completion_pipeline import (
    CompletedAsset,
    CompletedScene,
    InferenceSettings,
    complete_scene,
)
from scenefix.errors import ContractViolation, EmptyGeometry, EmptyScene
from scenefix.geom_core import CubeFrame, PointCloud, compute_aabb, aabb_iou, expand_bound, union_box, voxelize
from scenefix.scene_forge import occlusion_stats
from scenefix.seeding import child_rng
from scenefix.view_decomp import MIN_FRAGMENT_PIXELS, extract_fragment

log = logging.getLogger("scenefix.eval")

METRIC_COLUMNS = ["cd_scene", "fs_scene", "cd_object", "fs_object", "bbox_iou"]


class MetricConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau: float = Field(0.1, gt=0.0)
    samples_per_object: int = Field(8192, ge=1)
    normalization: Literal["gt_scene_unit_maxside", "none"] = "gt_scene_unit_maxside"
    seed: int = 0


# ─────────────────────────────────────────────────────────────
# Point-cloud metrics
# ─────────────────────────────────────────────────────────────

def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyGeometry("metric needs two non-empty clouds")
    return pts


def nearest_distances(a, b) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest neighbour in ``b``."""
    d, _ = cKDTree(_points(b)).query(_points(a), k=1)
    return d


def chamfer(a, b) -> float:
    d_ab = nearest_distances(a, b)
    d_ba = nearest_distances(b, a)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def fscore(a, b, tau: float = 0.1) -> float:
    """Harmonic mean (in percent) of precision of ``a`` and recall of ``b`` at ``tau``."""
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    precision = float((nearest_distances(a, b) < tau).mean())
    recall = float((nearest_distances(b, a) < tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def subsample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """At most ``n`` points drawn without replacement (all of them if fewer)."""
    if len(points) <= n:
        return points
    return points[np.sort(rng.choice(len(points), size=n, replace=False))]


# ─────────────────────────────────────────────────────────────
# Scene evaluation
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class EvalReport:
    scene_id: str
    cd_scene: float
    fs_scene: float
    cd_object: float
    fs_object: float
    bbox_iou: float
    instances: pd.DataFrame
    missing: list = field(default_factory=list)

    def row(self) -> dict:
        return {
            "scene_id": self.scene_id,
            **{k: getattr(self, k) for k in METRIC_COLUMNS},
            "matched": len(self.instances),
            "missing": len(self.missing),
        }


def scene_normalization(gt, cfg: MetricConfig) -> tuple[np.ndarray, float]:
    if cfg.normalization == "none":
        return np.zeros(3), 1.0
    box = union_box(inst.gt_box for inst in gt.instances)
    side = box.max_side
    return box.center, (1.0 / side if side > 0 else 1.0)


def evaluate_scene(pred: CompletedScene, gt, cfg: MetricConfig | None = None) -> EvalReport:
    """
    Object metrics per instance id present on both sides, scene metrics on the
    concatenation of all instance clouds. Ground-truth instances without a
    non-empty prediction are listed in ``missing`` and still count in the
    scene-level clouds.
    """
    cfg = cfg or MetricConfig()
    center, scale = scene_normalization(gt, cfg)
    predicted = {a.instance_id: a for a in pred.assets if not a.world_points.is_empty}

    def norm(points):
        return (points - center) * scale

    rows, missing = [], []
    pred_all, gt_all = [], []
    for inst in gt.instances:
        iid = inst.instance_id
        g = norm(subsample(inst.gt_surface.points, cfg.samples_per_object,
                           child_rng(cfg.seed, "eval", gt.scene_id, iid)))
        gt_all.append(g)
        asset = predicted.get(iid)
        if asset is None:
            missing.append(iid)
            continue
        p = norm(subsample(asset.world_points.points, cfg.samples_per_object,
                           child_rng(cfg.seed, "eval", gt.scene_id, iid)))
        pred_all.append(p)
        rows.append({
            "instance_id": iid,
            "cd": chamfer(p, g),
            "fs": fscore(p, g, cfg.tau),
            "bbox_iou": aabb_iou(compute_aabb(asset.world_points), inst.gt_box),
            "fallback": asset.fallback,
            "fragment_recall": asset.fragment_recall,
        })

    if not rows:
        raise EmptyScene(f"{gt.scene_id}: no predicted instance matches the ground truth")
    table = pd.DataFrame(rows)
    pred_cloud = np.concatenate(pred_all)
    gt_cloud = np.concatenate(gt_all)
    return EvalReport(
        scene_id=gt.scene_id,
        cd_scene=chamfer(pred_cloud, gt_cloud),
        fs_scene=fscore(pred_cloud, gt_cloud, cfg.tau),
        cd_object=float(table["cd"].mean()),
        fs_object=float(table["fs"].mean()),
        bbox_iou=float(table["bbox_iou"].mean()),
        instances=table,
        missing=sorted(missing),
    )


def reference_scene(gt, resolution: int = 32) -> CompletedScene:
    """The ground truth dressed as a completed scene (evaluation fixed point)."""
    assets = []
    for inst in gt.instances:
        grid = voxelize(inst.gt_surface, CubeFrame.around(inst.gt_box, resolution))
        assets.append(CompletedAsset(inst.instance_id, grid, inst.gt_box, expand_bound(inst.gt_box),
                                     inst.gt_box, inst.gt_surface, fragment_recall=1.0))
    return CompletedScene(gt.scene_id, 0, assets)


# ─────────────────────────────────────────────────────────────
# Reports
# ─────────────────────────────────────────────────────────────

def evaluation_table(reports) -> pd.DataFrame:
    """One row per scene (ordered by scene id) plus a SUMMARY row of means."""
    reports = sorted(reports, key=lambda r: r.scene_id)
    table = pd.DataFrame([r.row() for r in reports],
                         columns=["scene_id", *METRIC_COLUMNS, "matched", "missing"])
    if len(table):
        summary = {"scene_id": "SUMMARY", **table[METRIC_COLUMNS].mean().to_dict(),
                   "matched": int(table["matched"].sum()), "missing": int(table["missing"].sum())}
        table = pd.concat([table, pd.DataFrame([summary])], ignore_index=True)
    return table


def write_evaluation(reports, out_dir, failures: dict | None = None) -> pd.DataFrame:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = evaluation_table(reports)
    table.to_csv(out_dir / "evaluation.csv", index=False)
    detail = {
        r.scene_id: {"instances": r.instances.to_dict(orient="records"), "missing": r.missing}
        for r in sorted(reports, key=lambda r: r.scene_id)
    }
    if failures:
        detail["_failures"] = failures
    (out_dir / "evaluation_instances.json").write_text(json.dumps(detail, indent=2, default=float))
    return table


# ─────────────────────────────────────────────────────────────
# Experiments
# ─────────────────────────────────────────────────────────────

def robustness_sweep(samples, models, alphas, severity: float, settings: InferenceSettings,
                     metric_cfg: MetricConfig, seed: int) -> pd.DataFrame:
    """
    Complete and evaluate ``samples`` once per depth-mixing ``alpha``.

    Only the mixing of the input depth changes between rows; the ratio
    embedding stays at ``settings.ratio_alpha``.
    """
    rows = []
    samples = sorted(samples, key=lambda s: s.scene_id)
    for alpha in alphas:
        run = settings.model_copy(update={"alpha": float(alpha), "severity": float(severity)})
        reports = []
        for sample in tqdm(samples, desc=f"alpha={alpha}", leave=False):
            try:
                scene = complete_scene(sample, models, run, seed)
                reports.append(evaluate_scene(scene, sample, metric_cfg))
            except EmptyScene as e:
                log.error(f"  {sample.scene_id} @ alpha={alpha}: FAILED: {e}")
        table = evaluation_table(reports)
        means = table[table["scene_id"] == "SUMMARY"][METRIC_COLUMNS]
        row = {"alpha": float(alpha), "severity": float(severity), "scenes": len(reports)}
        row.update(means.iloc[0].to_dict() if len(means) else {k: float("nan") for k in METRIC_COLUMNS})
        rows.append(row)
        log.info(f"  alpha={alpha}: cd_object={row['cd_object']:.4f}  fs_object={row['fs_object']:.2f}")
    return pd.DataFrame(rows, columns=["alpha", "severity", "scenes", *METRIC_COLUMNS])


def boundary_containment(samples, alpha: float = 0.0, min_visible_fraction: float = 0.25,
                         expand_factor: float = 4.0, seed: int = 0,
                         min_pixels: int = MIN_FRAGMENT_PIXELS) -> pd.DataFrame:
    """
    Whether each sufficiently visible instance's ground-truth box lies inside
    the expanded box of its visible fragment (best view, mixed at ``alpha``).

    Instances below ``min_visible_fraction`` or covering fewer than
    ``min_pixels`` pixels in their best view are left out.
    """
    rows = []
    for sample in samples:
        stats = occlusion_stats(sample)
        for rec in stats.itertuples(index=False):
            if rec.visible_fraction < min_visible_fraction or rec.visible_pixels < min_pixels:
                continue
            rng = child_rng(seed, "containment", sample.scene_id, int(rec.instance_id))
            fragment = extract_fragment(sample, int(rec.best_view), int(rec.instance_id), alpha, rng,
                                        min_pixels=min_pixels)
            b_exp = expand_bound(compute_aabb(fragment.points), expand_factor)
            rows.append({
                "scene_id": sample.scene_id,
                "instance_id": int(rec.instance_id),
                "visible_fraction": float(rec.visible_fraction),
                "contained": b_exp.contains(sample.instance(int(rec.instance_id)).gt_box),
            })
    return pd.DataFrame(rows, columns=["scene_id", "instance_id", "visible_fraction", "contained"])
