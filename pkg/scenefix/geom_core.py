"""
Geometry types and pure operations shared by every other module.

Conventions
-----------
* World units are meters; the floor is the plane z = 0 and +z points up.
* Cameras follow the pinhole model with +z as the viewing direction, +x to the
  right and +y down in the image. Pixel (u, v) has its center at
  (u + 0.5, v + 0.5).
* The canonical cube is [-0.5, 0.5]^3. ``CubeFrame`` maps its world cube onto
  it; voxel cells are half-open [lo, hi) except the last cell per axis, which
  is closed.
* Occupancy is binarized with ``OCCUPANCY_THRESHOLD`` (0.5) unless a caller
  passes another threshold.

All types are immutable after construction (arrays are flagged read-only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scenefix.errors import ContractViolation, EmptyGeometry

OCCUPANCY_THRESHOLD = 0.5
EPS_MIN_SIDE = 1e-3        # substitute side (m) for degenerate visible boxes
ORTHONORMAL_TOL = 1e-6


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ─────────────────────────────────────────────────────────────
# Types
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class PointCloud:
    """World-space points with optional per-point RGB in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ContractViolation(
                    f"{len(cols)} colors for {len(pts)} points"
                )
            if cols.size and (cols.min() < 0.0 or cols.max() > 1.0):
                raise ContractViolation("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(cols))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds], axis=0)
        else:
            cols = None
        return cls(pts, cols)


@dataclass(frozen=True, eq=False)
class AABB:
    """Axis-aligned box; ``min_corner <= max_corner`` componentwise."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractViolation("box corners must be finite")
        if np.any(lo > hi):
            raise ContractViolation(f"min corner {lo} exceeds max corner {hi}")
        object.__setattr__(self, "min_corner", _frozen(lo))
        object.__setattr__(self, "max_corner", _frozen(hi))

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def max_side(self) -> float:
        return float(self.extent.max())

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, other: "AABB", tol: float = 0.0) -> bool:
        return bool(
            np.all(other.min_corner >= self.min_corner - tol)
            and np.all(other.max_corner <= self.max_corner + tol)
        )

    def contains_points(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all(
            (pts >= self.min_corner - tol) & (pts <= self.max_corner + tol), axis=1
        )

    def overlaps(self, other: "AABB") -> bool:
        """Strict overlap: boxes that only touch on a face do not overlap."""
        return bool(
            np.all(self.min_corner < other.max_corner)
            and np.all(other.min_corner < self.max_corner)
        )

    def dilate(self, amount: float) -> "AABB":
        return AABB(self.min_corner - amount, self.max_corner + amount)

    def scaled(self, factor: float) -> "AABB":
        """Scale about the center."""
        half = self.extent * factor / 2.0
        return AABB(self.center - half, self.center + half)

    def translated(self, offset) -> "AABB":
        offset = np.asarray(offset, dtype=np.float64)
        return AABB(self.min_corner + offset, self.max_corner + offset)

    def to_list(self) -> list[list[float]]:
        return [self.min_corner.tolist(), self.max_corner.tolist()]

    @classmethod
    def from_list(cls, values) -> "AABB":
        return cls(values[0], values[1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, AABB):
            return NotImplemented
        return bool(
            np.array_equal(self.min_corner, other.min_corner)
            and np.array_equal(self.max_corner, other.max_corner)
        )

    def __repr__(self) -> str:
        return f"AABB({self.min_corner.tolist()}, {self.max_corner.tolist()})"


@dataclass(frozen=True, eq=False)
class CubeFrame:
    """A cubic world box discretized into ``resolution``^3 voxels."""

    world_box: AABB
    resolution: int

    def __post_init__(self):
        ext = self.world_box.extent
        if int(self.resolution) < 2:
            raise ContractViolation(f"resolution must be >= 2, got {self.resolution}")
        if ext[0] <= 0.0:
            raise ContractViolation("frame cube side must be positive")
        if not np.allclose(ext, ext[0], rtol=1e-9, atol=0.0):
            raise ContractViolation(f"frame box is not a cube: sides {ext.tolist()}")
        object.__setattr__(self, "resolution", int(self.resolution))

    @classmethod
    def around(cls, box: AABB, resolution: int) -> "CubeFrame":
        """Frame over the cube that shares ``box``'s center and max side."""
        return cls(cubify(box), resolution)

    @property
    def side(self) -> float:
        return float(self.world_box.extent[0])

    @property
    def pitch(self) -> float:
        return self.side / self.resolution

    @property
    def center(self) -> np.ndarray:
        return self.world_box.center

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        """World positions of the centers of voxels ``indices`` (M, 3)."""
        idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
        return self.world_box.min_corner + (idx + 0.5) * self.pitch

    def cell_face(self, index) -> np.ndarray:
        """World coordinate of cell boundary ``index`` (0..R) on each axis."""
        w = np.asarray(index, dtype=np.float64) / self.resolution
        return self.world_box.min_corner * (1.0 - w) + self.world_box.max_corner * w

    def voxel_boxes_extent(self, indices: np.ndarray) -> AABB:
        idx = np.asarray(indices).reshape(-1, 3)
        return AABB(self.cell_face(idx.min(axis=0)), self.cell_face(idx.max(axis=0) + 1))


@dataclass(frozen=True, eq=False)
class OccGrid:
    """Dense occupancy in [0, 1] with optional per-voxel RGB."""

    frame: CubeFrame
    occupancy: np.ndarray
    rgb: np.ndarray | None = None
    dropped_points: int = 0

    def __post_init__(self):
        r = self.frame.resolution
        occ = np.asarray(self.occupancy, dtype=np.float32)
        if occ.shape != (r, r, r):
            raise ContractViolation(f"occupancy shape {occ.shape} != {(r, r, r)}")
        if occ.size and (occ.min() < 0.0 or occ.max() > 1.0):
            raise ContractViolation("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "occupancy", _frozen(occ, np.float32))
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float32)
            if rgb.shape != (r, r, r, 3):
                raise ContractViolation(f"rgb shape {rgb.shape} != {(r, r, r, 3)}")
            if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
                raise ContractViolation("rgb values must lie in [0, 1]")
            object.__setattr__(self, "rgb", _frozen(rgb, np.float32))

    def binary(self, threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
        return self.occupancy > threshold

    def occupied_indices(self, threshold: float = OCCUPANCY_THRESHOLD) -> np.ndarray:
        return np.argwhere(self.binary(threshold))

    def with_rgb(self, rgb: np.ndarray) -> "OccGrid":
        return OccGrid(self.frame, self.occupancy, rgb, self.dropped_points)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: intrinsics K (pixels) and a rigid world→camera map."""

    intrinsics: np.ndarray
    world_to_cam: np.ndarray
    width: int
    height: int
    _cam_to_world: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        m = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ContractViolation("focal entries must be positive")
        if abs(k[1, 0]) + abs(k[2, 0]) + abs(k[2, 1]) > 0 or k[2, 2] != 1.0:
            raise ContractViolation("intrinsics must be upper-triangular with K[2,2] = 1")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= ORTHONORMAL_TOL:
            raise ContractViolation("world_to_cam rotation block is not orthonormal")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ContractViolation("world_to_cam last row must be [0, 0, 0, 1]")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ContractViolation("raster size must be positive")
        object.__setattr__(self, "intrinsics", _frozen(k))
        object.__setattr__(self, "world_to_cam", _frozen(m))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        inv = np.eye(4)
        inv[:3, :3] = rot.T
        inv[:3, 3] = -rot.T @ m[:3, 3]
        object.__setattr__(self, "_cam_to_world", _frozen(inv))

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float = 50.0,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=0)
        # Re-orthonormalize so the rotation check holds to machine precision
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ eye
        focal = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        k = np.array([
            [focal, 0.0, width / 2.0],
            [0.0, focal, height / 2.0],
            [0.0, 0.0, 1.0],
        ])
        return cls(k, m, width, height)

    @property
    def cam_to_world(self) -> np.ndarray:
        return self._cam_to_world

    @property
    def center(self) -> np.ndarray:
        return self._cam_to_world[:3, 3].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.world_to_cam[:3, :3].T + self.world_to_cam[:3, 3]

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and camera depth z of world points."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics[0, 0] * pc[:, 0] / z + self.intrinsics[0, 1] * pc[:, 1] / z \
                + self.intrinsics[0, 2]
            v = self.intrinsics[1, 1] * pc[:, 1] / z + self.intrinsics[1, 2]
        return u, v, z

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Per-pixel world ray origin (3,) and directions (H, W, 3).

        Directions are scaled so that the camera-space z component is 1; a
        ray parameter t therefore equals the camera depth of the hit.
        """
        us = np.arange(self.width, dtype=np.float64) + 0.5
        vs = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(us, vs)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.intrinsics).T
        d_world = d_cam @ self.cam_to_world[:3, :3].T
        return self.center, d_world


# ─────────────────────────────────────────────────────────────
# Box helpers
# ─────────────────────────────────────────────────────────────

def cubify(box: AABB) -> AABB:
    """Cube sharing ``box``'s center with side equal to its max side."""
    half = box.max_side / 2.0
    return AABB(box.center - half, box.center + half)


def union_box(boxes) -> AABB:
    boxes = list(boxes)
    if not boxes:
        raise EmptyGeometry("union of zero boxes")
    lo = np.min([b.min_corner for b in boxes], axis=0)
    hi = np.max([b.max_corner for b in boxes], axis=0)
    return AABB(lo, hi)


# ─────────────────────────────────────────────────────────────
# Operations
# ─────────────────────────────────────────────────────────────

def backproject_depth(depth: np.ndarray, mask: np.ndarray, camera: Camera) -> PointCloud:
    """One world point per true mask pixel, through the pixel center."""
    depth = np.asarray(depth)
    mask = np.asarray(mask, dtype=bool)
    expected = (camera.height, camera.width)
    if depth.shape != expected or mask.shape != expected:
        raise ContractViolation(
            f"raster shapes {depth.shape}/{mask.shape} do not match camera {expected}"
        )
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return PointCloud.empty()
    z = depth[vs, us].astype(np.float64)
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise ContractViolation("depth must be finite and positive under the mask")
    k = camera.intrinsics
    y = (vs + 0.5 - k[1, 2]) / k[1, 1] * z
    x = ((us + 0.5 - k[0, 2]) * z - k[0, 1] * y) / k[0, 0]
    pts_cam = np.stack([x, y, z], axis=1)
    c2w = camera.cam_to_world
    return PointCloud(pts_cam @ c2w[:3, :3].T + c2w[:3, 3])


def compute_aabb(pc: PointCloud) -> AABB:
    if pc.is_empty:
        raise EmptyGeometry("cannot bound an empty point cloud")
    return AABB(pc.points.min(axis=0), pc.points.max(axis=0))


def expand_bound(b_vis: AABB, factor: float = 4.0, eps_min: float = EPS_MIN_SIDE) -> AABB:
    """
    Conservative cube around the visible box.

    The cube is centered at the visible box center with side
    ``factor`` x its max side; a zero max side is replaced by ``eps_min``.
    """
    if not factor > 0:
        raise ContractViolation(f"expansion factor must be positive, got {factor}")
    side = b_vis.max_side
    if side <= 0.0:
        side = eps_min
    half = factor * side / 2.0
    return AABB(b_vis.center - half, b_vis.center + half)


def normalize_points(pc: PointCloud, frame: CubeFrame) -> PointCloud:
    """Map ``frame.world_box`` affinely onto [-0.5, 0.5]^3."""
    pts = (pc.points - frame.center) / frame.side
    return PointCloud(pts, pc.colors)


def denormalize_points(pc: PointCloud, frame: CubeFrame) -> PointCloud:
    pts = pc.points * frame.side + frame.center
    return PointCloud(pts, pc.colors)


def voxel_indices(pc: PointCloud, frame: CubeFrame) -> tuple[np.ndarray, int]:
    """Voxel index (M, 3) of every point inside the frame, and the dropped count."""
    if pc.is_empty:
        return np.zeros((0, 3), dtype=np.int64), 0
    r = frame.resolution
    n = normalize_points(pc, frame).points
    inside = np.all((n >= -0.5) & (n <= 0.5), axis=1)
    idx = np.floor((n[inside] + 0.5) * r).astype(np.int64)
    np.clip(idx, 0, r - 1, out=idx)  # closes the last cell on each axis
    return idx, int((~inside).sum())


def voxelize(pc: PointCloud, frame: CubeFrame) -> OccGrid:
    """Binary occupancy of the cells hit by at least one point."""
    r = frame.resolution
    occ = np.zeros((r, r, r), dtype=np.float32)
    idx, dropped = voxel_indices(pc, frame)
    if len(idx):
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return OccGrid(frame, occ, dropped_points=dropped)


def grid_to_pointcloud(grid: OccGrid, threshold: float = OCCUPANCY_THRESHOLD) -> PointCloud:
    """Voxel-center points of occupied cells, colored when the grid has rgb."""
    idx = grid.occupied_indices(threshold)
    if len(idx) == 0:
        return PointCloud.empty()
    pts = grid.frame.voxel_centers(idx)
    cols = None
    if grid.rgb is not None:
        cols = grid.rgb[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)
    return PointCloud(pts, cols)


def tight_box_of_grid(grid: OccGrid, threshold: float = OCCUPANCY_THRESHOLD) -> AABB:
    """World box spanning the outer faces of all occupied voxels."""
    idx = grid.occupied_indices(threshold)
    if len(idx) == 0:
        raise EmptyGeometry("no voxel above threshold")
    return grid.frame.voxel_boxes_extent(idx)


def aabb_iou(a: AABB, b: AABB) -> float:
    """Volumetric IoU; 0 for disjoint boxes and for a zero-volume union."""
    inter_dims = np.clip(
        np.minimum(a.max_corner, b.max_corner) - np.maximum(a.min_corner, b.min_corner),
        0.0,
        None,
    )
    inter = float(np.prod(inter_dims))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def grid_iou(a: OccGrid, b: OccGrid, threshold: float = OCCUPANCY_THRESHOLD) -> float:
    """IoU of two thresholded grids on the same resolution (0 when both empty)."""
    if a.frame.resolution != b.frame.resolution:
        raise ContractViolation("grids must share a resolution")
    ba, bb = a.binary(threshold), b.binary(threshold)
    union = np.logical_or(ba, bb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(ba, bb).sum() / union)


def surface_voxel_mask(occupied: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty (or out-of-grid) 6-neighbour."""
    padded = np.pad(occupied, 1, constant_values=False)
    interior = np.ones_like(occupied, dtype=bool)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occupied & ~interior
