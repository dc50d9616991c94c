"""
Per-instance fragments of one rendered view.

A fragment is the visible part of an instance: its mask in the view's
instance-id raster and the back-projection of the view's *mixed* depth under
that mask. The mixed depth blends the ground-truth raster with a synthetic
"estimated" depth produced by a parametric error model, which stands in for
monocular depth estimators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from scenefix.errors import ContractViolation, EmptyGeometry
from scenefix.geom_core import Camera, CubeFrame, OccGrid, PointCloud, backproject_depth, voxelize

log = logging.getLogger("scenefix.views")

WARP_GRID = 4               # coarse control points per axis of the warp field
MIN_FACTOR = 0.05           # perturbed depth never drops below 5 % of the true depth
MIN_FRAGMENT_PIXELS = 16    # fewer mask pixels than this and an instance does not count as visible

# Weights of (smooth warp, per-pixel noise, global scale, global shift).
ESTIMATOR_PROFILES = {
    "warp": (1.0, 0.1, 0.0, 0.0),
    "noise": (0.2, 1.0, 0.0, 0.0),
    "global": (0.2, 0.1, 1.0, 1.0),
    "balanced": (0.6, 0.3, 0.4, 0.2),
}


# ─────────────────────────────────────────────────────────────
# Depth estimator surrogate
# ─────────────────────────────────────────────────────────────

def _smooth_field(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(size=(WARP_GRID, WARP_GRID))
    ys = np.linspace(0.0, WARP_GRID - 1, shape[0])
    xs = np.linspace(0.0, WARP_GRID - 1, shape[1])
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(coarse, [yy, xx], order=1, mode="nearest")


def perturb_depth(d_gt: np.ndarray, rng: np.random.Generator, severity: float,
                  profile: str = "balanced") -> np.ndarray:
    """
    Synthetic estimated depth: a multiplicative warp of ``d_gt`` plus additive
    per-pixel noise and a global shift.

    ``d_est = d_gt * (1 + severity * (w_warp*field + w_scale*g))
    + severity * (w_noise*noise + w_shift*s) * median``, where ``median`` is
    the median foreground depth, so noise and shift are in meters. The result
    never drops below ``MIN_FACTOR * d_gt``. All draws are made regardless of
    severity, so a given rng state always produces the same field; severity 0
    returns ``d_gt`` exactly. Pixels without a hit (depth 0) stay 0.
    """
    if severity < 0:
        raise ContractViolation(f"severity must be >= 0, got {severity}")
    if profile not in ESTIMATOR_PROFILES:
        raise ContractViolation(f"unknown estimator profile {profile!r}")
    d_gt = np.asarray(d_gt)
    w_warp, w_noise, w_scale, w_shift = ESTIMATOR_PROFILES[profile]

    field = _smooth_field(d_gt.shape, rng)
    noise = rng.normal(size=d_gt.shape)
    g_scale, g_shift = rng.normal(size=2)

    fg = d_gt > 0
    d = d_gt.astype(np.float64)
    if severity == 0 or not fg.any():
        return d_gt.copy()
    median = float(np.median(d[fg]))
    factor = 1.0 + severity * (w_warp * field + w_scale * g_scale)
    offset = severity * (w_noise * noise + w_shift * g_shift) * median
    d_est = d * np.maximum(factor, MIN_FACTOR) + offset
    d_est = np.maximum(d_est, MIN_FACTOR * d)
    return np.where(fg, d_est, 0.0).astype(d_gt.dtype)


def mix_depth(d_gt: np.ndarray, d_est: np.ndarray, alpha: float) -> np.ndarray:
    """Pointwise ``alpha * d_est + (1 - alpha) * d_gt``; exact at the endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")
    d_gt = np.asarray(d_gt)
    d_est = np.asarray(d_est)
    if d_gt.shape != d_est.shape:
        raise ContractViolation(f"depth shapes differ: {d_gt.shape} vs {d_est.shape}")
    if alpha == 0.0:
        return d_gt.copy()
    if alpha == 1.0:
        return d_est.copy()
    mixed = d_gt.astype(np.float64) + alpha * (d_est.astype(np.float64) - d_gt)
    return mixed.astype(np.result_type(d_gt.dtype, d_est.dtype))


@dataclass(frozen=True, eq=False)
class DepthMix:
    d_gt: np.ndarray
    d_est: np.ndarray
    alpha: float

    @property
    def d(self) -> np.ndarray:
        return mix_depth(self.d_gt, self.d_est, self.alpha)


# ─────────────────────────────────────────────────────────────
# Fragments
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Fragment:
    instance_id: int
    points: PointCloud
    mask: np.ndarray
    alpha: float
    source_view: int
    camera: Camera
    depth: np.ndarray               # mixed depth of the whole view
    instid: np.ndarray              # instance-id raster of the view
    rgb: np.ndarray | None = None   # (H, W, 3) uint8 of the view

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


def best_view(sample, instance_id: int) -> int:
    """View in which ``instance_id`` covers the most pixels (lowest index on ties)."""
    counts = [int((ids == instance_id).sum()) for ids in sample.instids]
    return int(np.argmax(counts))


def estimated_depth(sample, view: int, rng: np.random.Generator, severity: float = 0.1,
                    profile: str = "balanced") -> np.ndarray:
    return perturb_depth(sample.depths[view], rng, severity, profile)


def extract_fragment(sample, view: int, instance_id: int, alpha: float,
                     rng: np.random.Generator, *, severity: float = 0.1,
                     profile: str = "balanced", d_est: np.ndarray | None = None,
                     min_pixels: int = MIN_FRAGMENT_PIXELS) -> Fragment:
    """
    Mask and back-projected points of one instance in one view.

    ``d_est`` may be passed to share one estimated depth across the instances
    of a view; otherwise it is drawn from ``rng``. An instance covering fewer
    than ``min_pixels`` pixels is not visible and raises EmptyGeometry.
    """
    if not 0 <= view < sample.n_views:
        raise ContractViolation(f"view {view} out of range for {sample.n_views} views")
    if min_pixels < 1:
        raise ContractViolation(f"min_pixels must be >= 1, got {min_pixels}")
    mask = sample.instids[view] == instance_id
    count = int(mask.sum())
    if count == 0:
        raise EmptyGeometry(f"instance {instance_id} is not visible in view {view}")
    if count < min_pixels:
        raise EmptyGeometry(f"instance {instance_id} covers {count} pixels in view {view}, "
                            f"below the visibility threshold of {min_pixels}")
    if d_est is None:
        d_est = estimated_depth(sample, view, rng, severity, profile)
    depth = mix_depth(sample.depths[view], d_est, alpha)
    camera = sample.cameras[view]
    points = backproject_depth(depth, mask, camera)
    rgb = sample.rgbs[view] if sample.rgbs is not None else None
    return Fragment(instance_id, points, mask, float(alpha), int(view), camera, depth,
                    sample.instids[view], rgb)


# ─────────────────────────────────────────────────────────────
# Visibility
# ─────────────────────────────────────────────────────────────

def grid_visibility_ratio(grid: OccGrid, camera: Camera, depth: np.ndarray) -> float:
    """
    Fraction of occupied voxels whose centers project inside the raster and
    are not behind the raster depth by more than half a voxel pitch.

    Raster pixels without a hit (depth 0) occlude nothing.
    """
    idx = grid.occupied_indices()
    if len(idx) == 0:
        return 0.0
    centers = grid.frame.voxel_centers(idx)
    u, v, z = camera.project(centers)
    inside = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    if not inside.any():
        return 0.0
    ui = np.floor(u[inside]).astype(np.int64)
    vi = np.floor(v[inside]).astype(np.int64)
    raster = np.asarray(depth, dtype=np.float64)[vi, ui]
    raster = np.where(raster > 0, raster, np.inf)
    facing = z[inside] <= raster + grid.frame.pitch / 2.0
    return float(facing.sum() / len(idx))


def visibility_ratio(instance, camera: Camera, depth: np.ndarray, resolution: int = 32) -> float:
    """Visibility of the instance's voxelized ground-truth surface from ``camera``."""
    frame = CubeFrame.around(instance.gt_box, resolution)
    return grid_visibility_ratio(voxelize(instance.gt_surface, frame), camera, depth)
