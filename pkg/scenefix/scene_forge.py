"""
Procedural forging of desk-scale scenes.

A scene is built by drawing ``n_candidates`` parametric primitives and placing
them one by one on the floor (or on the flat top of an already placed
instance); candidates that cannot be placed without an AABB collision after
``max_attempts`` tries are skipped. Scenes keeping fewer than
``min_instances`` raise ``ForgeFailure`` so the caller can move to the next
seed.

Every random decision comes from a named child stream of the scene seed, so a
scene is a pure function of ``(ForgeConfig, seed)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from scenefix.errors import ContractViolation, ForgeFailure
from scenefix.geom_core import AABB, Camera, PointCloud, compute_aabb, union_box
from scenefix.rasterizer import local_to_world, render, render_instance_mask, rgb_to_u8, rotation_z
from scenefix.seeding import child_rng
from scenefix.solids import Box, Cylinder, Plane, Sphere

log = logging.getLogger("scenefix.forge")

PRIMITIVE_KINDS = ("box", "cylinder", "sphere", "l_shape", "table", "stack")

# Uniform ranges (meters) of each kind's parameters, in parameter order.
PARAM_RANGES = {
    "box": [(0.10, 0.40), (0.10, 0.40), (0.10, 0.40)],                 # sx, sy, sz
    "cylinder": [(0.05, 0.20), (0.10, 0.40)],                          # radius, height
    "sphere": [(0.05, 0.20)],                                          # radius
    "l_shape": [(0.20, 0.40), (0.10, 0.20), (0.15, 0.35), (0.03, 0.08)],  # length, width, height, thickness
    "table": [(0.30, 0.50), (0.30, 0.50), (0.25, 0.45), (0.02, 0.05), (0.02, 0.05)],  # w, d, h, top, leg
    "stack": [(0.15, 0.35), (0.15, 0.35), (0.08, 0.25), (0.40, 0.90), (0.40, 0.90), (0.08, 0.25)],
}
FLAT_TOP_KINDS = ("box", "cylinder", "table", "stack")
COLOR_RANGE = (0.1, 0.9)
ARENA_SIDES = ("x_min", "x_max", "y_min", "y_max")


# ─────────────────────────────────────────────────────────────
# Configuration
# ─────────────────────────────────────────────────────────────

class ForgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arena_size: tuple[float, float] = (1.6, 1.6)          # meters, centered on the origin
    arena_height: float = Field(1.5, gt=0)
    n_candidates: int = Field(20, ge=1)
    min_instances: int = Field(5, ge=1)
    max_attempts: int = Field(100, ge=1)
    scale_range: tuple[float, float] = (0.5, 2.0)
    support_prob: float = Field(0.25, ge=0.0, le=1.0)
    max_walls: int = Field(4, ge=0, le=4)
    wall_height: float = Field(1.2, gt=0)
    n_cameras: int = Field(4, ge=1)
    width: int = Field(128, ge=8)
    height: int = Field(128, ge=8)
    fov_deg: float = Field(50.0, gt=0, lt=180)
    camera_radius: tuple[float, float] = (1.2, 2.0)       # multiples of the arena diagonal
    camera_elevation_deg: tuple[float, float] = (20.0, 60.0)
    look_at_height: float = Field(0.2, ge=0)
    look_at_jitter: float = Field(0.05, ge=0)
    surface_samples: int = Field(8192, ge=1)
    min_pixels: int = Field(16, ge=1)
    render_rgb: bool = True

    @model_validator(mode="after")
    def _check_ranges(self):
        if min(self.arena_size) <= 0:
            raise ValueError("arena_size must be positive")
        for name in ("scale_range", "camera_radius", "camera_elevation_deg"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must be an increasing positive range")
        return self

    def arena_box(self) -> AABB:
        hx, hy = self.arena_size[0] / 2.0, self.arena_size[1] / 2.0
        return AABB([-hx, -hy, 0.0], [hx, hy, self.arena_height])


# ─────────────────────────────────────────────────────────────
# Primitives
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Primitive:
    kind: str
    params: tuple
    base_color: tuple

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ContractViolation(f"unknown primitive kind {self.kind!r}")
        if len(self.params) != len(PARAM_RANGES[self.kind]):
            raise ContractViolation(f"{self.kind} takes {len(PARAM_RANGES[self.kind])} params")
        if any(p <= 0 for p in self.params):
            raise ContractViolation(f"{self.kind} params must be positive: {self.params}")
        if any(c < 0 or c > 1 for c in self.base_color):
            raise ContractViolation("base_color must lie in [0, 1]")

    def parts(self) -> tuple:
        """Non-overlapping solids in the local frame, resting on z = 0."""
        p = self.params
        if self.kind == "box":
            return (Box((0.0, 0.0, p[2] / 2), (p[0] / 2, p[1] / 2, p[2] / 2)),)
        if self.kind == "cylinder":
            return (Cylinder((0.0, 0.0, p[1] / 2), p[0], p[1] / 2),)
        if self.kind == "sphere":
            return (Sphere((0.0, 0.0, p[0]), p[0]),)
        if self.kind == "l_shape":
            length, width, height, t = p
            base = Box((0.0, 0.0, t / 2), (length / 2, width / 2, t / 2))
            upright_h = max(height - t, t)
            upright = Box((length / 2 - t / 2, 0.0, t + upright_h / 2), (t / 2, width / 2, upright_h / 2))
            return base, upright
        if self.kind == "table":
            w, d, h, top, leg = p
            top = min(top, h / 2)
            leg = min(leg, w / 4, d / 4)
            leg_h = h - top
            parts = [Box((0.0, 0.0, h - top / 2), (w / 2, d / 2, top / 2))]
            for sx in (-1, 1):
                for sy in (-1, 1):
                    parts.append(Box((sx * (w / 2 - leg / 2), sy * (d / 2 - leg / 2), leg_h / 2),
                                     (leg / 2, leg / 2, leg_h / 2)))
            return tuple(parts)
        # stack: lower box plus a smaller box centered on top of it
        w1, d1, h1, fw, fd, h2 = p
        return (
            Box((0.0, 0.0, h1 / 2), (w1 / 2, d1 / 2, h1 / 2)),
            Box((0.0, 0.0, h1 + h2 / 2), (w1 * fw / 2, d1 * fd / 2, h2 / 2)),
        )

    def top_disk(self) -> tuple[np.ndarray, float] | None:
        """Local center and radius of a disk inscribed in the flat top, if any."""
        if self.kind not in FLAT_TOP_KINDS:
            return None
        top = self.parts()[-1] if self.kind == "stack" else self.parts()[0]
        lo, hi = top.bounds()
        center = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, hi[2]])
        radius = top.radius if isinstance(top, Cylinder) else float(min(hi[0] - lo[0], hi[1] - lo[1]) / 2)
        return center, radius

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "base_color": list(self.base_color)}


def sample_primitive(rng: np.random.Generator) -> Primitive:
    kind = PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))]
    params = tuple(float(rng.uniform(lo, hi)) for lo, hi in PARAM_RANGES[kind])
    color = tuple(float(c) for c in rng.uniform(*COLOR_RANGE, size=3))
    return Primitive(kind, params, color)


def world_box_of(primitive: Primitive, scale: float, theta: float, translation) -> AABB:
    """Exact world AABB of the transformed primitive."""
    boxes = []
    for part in primitive.parts():
        if isinstance(part, Box):
            corners = local_to_world(part.corners(), scale, theta, translation)
            boxes.append(AABB(corners.min(axis=0), corners.max(axis=0)))
            continue
        center = local_to_world(np.asarray(part.center)[None], scale, theta, translation)[0]
        if isinstance(part, Cylinder):
            half = scale * np.array([part.radius, part.radius, part.half_height])
        else:
            half = np.full(3, scale * part.radius)
        boxes.append(AABB(center - half, center + half))
    return union_box(boxes)


# ─────────────────────────────────────────────────────────────
# Placement
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SupportSurface:
    """Flat disk (world space) another instance may rest on."""

    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class Placement:
    scale: float
    z_rotation: float
    translation: np.ndarray
    world_box: AABB
    attempts: int
    on_support: bool = False


@dataclass(frozen=True)
class Rejected:
    attempts: int


def support_surface(primitive: Primitive, placement: Placement) -> SupportSurface | None:
    disk = primitive.top_disk()
    if disk is None:
        return None
    center, radius = disk
    world = local_to_world(center[None], placement.scale, placement.z_rotation, placement.translation)[0]
    return SupportSurface(world, radius * placement.scale)


def try_place(primitive: Primitive, placed, arena: AABB, rng: np.random.Generator,
              max_attempts: int = 100, *, scale_range=(0.5, 2.0), supports=(),
              support_prob: float = 0.0) -> Placement | Rejected:
    """
    Find a collision-free pose for ``primitive`` among the ``placed`` boxes.

    Each attempt draws a scale, a rotation about z and a rest position: on
    the floor anywhere the box stays inside the arena, or (with probability
    ``support_prob`` when supports exist) centered on a support disk.
    Touching boxes do not collide.
    """
    if arena.volume <= 0:
        raise ContractViolation("arena must have positive volume")
    placed = list(placed)
    supports = list(supports)
    for attempt in range(1, max_attempts + 1):
        scale = float(rng.uniform(*scale_range))
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        rel = world_box_of(primitive, scale, theta, (0.0, 0.0, 0.0))
        use_support = bool(supports) and rng.random() < support_prob
        if use_support:
            sup = supports[int(rng.integers(len(supports)))]
            r = sup.radius * np.sqrt(rng.random())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            xy = sup.center[:2] + r * np.array([np.cos(phi), np.sin(phi)])
            base_z = sup.center[2]
        else:
            lo = arena.min_corner[:2] - rel.min_corner[:2]
            hi = arena.max_corner[:2] - rel.max_corner[:2]
            u = rng.random(2)
            if np.any(lo > hi):
                continue
            xy = lo + u * (hi - lo)
            base_z = arena.min_corner[2]
        translation = np.array([xy[0], xy[1], base_z - rel.min_corner[2]])
        box = rel.translated(translation)
        if not arena.contains(box):
            continue
        if any(box.overlaps(other) for other in placed):
            continue
        return Placement(scale, theta, translation, box, attempt, use_support)
    return Rejected(max_attempts)


# ─────────────────────────────────────────────────────────────
# Scene types
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class InstanceRecord:
    instance_id: int
    primitive: Primitive
    scale: float
    z_rotation: float
    translation: np.ndarray
    gt_surface: PointCloud
    gt_box: AABB = field(init=False)

    def __post_init__(self):
        if self.instance_id <= 0:
            raise ContractViolation("instance ids are positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "gt_box", compute_aabb(self.gt_surface))

    @property
    def parts(self) -> tuple:
        return self.primitive.parts()

    @property
    def base_color(self) -> tuple:
        return self.primitive.base_color

    @property
    def world_box(self) -> AABB:
        return world_box_of(self.primitive, self.scale, self.z_rotation, self.translation)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance (m) from world points to the nearest part surface."""
        local = (np.asarray(points) - self.translation) @ rotation_z(self.z_rotation) / self.scale
        dist = np.min([part.surface_distance(local) for part in self.parts], axis=0)
        return dist * self.scale


@dataclass(frozen=True, eq=False)
class SceneSample:
    scene_id: str
    seed: int
    planes: tuple
    instances: tuple
    cameras: tuple
    depths: tuple             # per view (H, W) float32
    instids: tuple            # per view (H, W) uint16
    rgbs: tuple | None = None  # per view (H, W, 3) uint8

    @property
    def instance_ids(self) -> list[int]:
        return [inst.instance_id for inst in self.instances]

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def n_walls(self) -> int:
        return sum(1 for p in self.planes if p.kind == "wall")

    def instance(self, instance_id: int) -> InstanceRecord:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(f"instance {instance_id} not in {self.scene_id}")


def scene_id_for_seed(seed: int) -> str:
    return f"scene_{seed:06d}"


# ─────────────────────────────────────────────────────────────
# Forging
# ─────────────────────────────────────────────────────────────

def build_planes(config: ForgeConfig, arena: AABB, rng: np.random.Generator) -> tuple:
    """Floor plus 0–4 inward-facing walls on randomly chosen arena sides."""
    lo, hi = arena.min_corner, arena.max_corner
    cx, cy = arena.center[0], arena.center[1]
    sx, sy = arena.extent[0], arena.extent[1]
    floor = Plane((cx, cy, lo[2]), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), 0.75 * sx, 0.75 * sy, "floor")
    n_walls = int(rng.integers(0, config.max_walls + 1))
    sides = [ARENA_SIDES[i] for i in sorted(rng.permutation(4)[:n_walls])]
    hz = config.wall_height / 2.0
    walls = {
        "x_min": Plane((lo[0], cy, lo[2] + hz), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), sy / 2, hz),
        "x_max": Plane((hi[0], cy, lo[2] + hz), (-1.0, 0.0, 0.0), (0.0, 1.0, 0.0), sy / 2, hz),
        "y_min": Plane((cx, lo[1], lo[2] + hz), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), sx / 2, hz),
        "y_max": Plane((cx, hi[1], lo[2] + hz), (0.0, -1.0, 0.0), (1.0, 0.0, 0.0), sx / 2, hz),
    }
    return (floor,) + tuple(walls[s] for s in sides)


def sample_cameras(config: ForgeConfig, arena: AABB, rng: np.random.Generator) -> tuple:
    """Cameras on the upper hemisphere around the arena, looking at its center."""
    diagonal = float(np.linalg.norm(arena.extent[:2]))
    base_target = np.array([arena.center[0], arena.center[1], arena.min_corner[2] + config.look_at_height])
    cameras = []
    for _ in range(config.n_cameras):
        radius = rng.uniform(*config.camera_radius) * diagonal
        elevation = np.deg2rad(rng.uniform(*config.camera_elevation_deg))
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        target = base_target + rng.normal(0.0, config.look_at_jitter, size=3)
        eye = target + radius * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        cameras.append(Camera.look_at(eye, target, config.width, config.height, config.fov_deg))
    return tuple(cameras)


def sample_surface(primitive: Primitive, scale: float, theta: float, translation,
                   n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted world surface samples, rounded through float32."""
    parts = primitive.parts()
    areas = np.array([p.area() for p in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    local = np.concatenate([p.sample_surface(int(k), rng) for p, k in zip(parts, counts)], axis=0)
    world = local_to_world(local, scale, theta, translation)
    return PointCloud(world.astype(np.float32).astype(np.float64))


def _render_views(config, planes, instances, cameras):
    results = [render(planes, instances, cam, shade=config.render_rgb) for cam in cameras]
    depths = tuple(r.depth for r in results)
    instids = tuple(r.instid for r in results)
    rgbs = tuple(rgb_to_u8(r.rgb) for r in results) if config.render_rgb else None
    return depths, instids, rgbs


def forge_scene(config: ForgeConfig, seed: int) -> SceneSample:
    arena = config.arena_box()
    layout_rng = child_rng(seed, "layout")

    drafts: list[tuple[Primitive, Placement]] = []
    boxes: list[AABB] = []
    supports: list[SupportSurface] = []
    for k in range(config.n_candidates):
        primitive = sample_primitive(layout_rng)
        result = try_place(primitive, boxes, arena, layout_rng, config.max_attempts,
                           scale_range=config.scale_range, supports=supports,
                           support_prob=config.support_prob)
        if isinstance(result, Rejected):
            log.debug(f"  seed {seed}: candidate {k} ({primitive.kind}) rejected")
            continue
        drafts.append((primitive, result))
        boxes.append(result.world_box)
        sup = support_surface(primitive, result)
        if sup is not None:
            supports.append(sup)

    if len(drafts) < config.min_instances:
        raise ForgeFailure(seed, len(drafts), config.min_instances)

    planes = build_planes(config, arena, child_rng(seed, "walls"))
    cameras = sample_cameras(config, arena, child_rng(seed, "cameras"))
    instances = [
        InstanceRecord(
            instance_id=i,
            primitive=primitive,
            scale=placement.scale,
            z_rotation=placement.z_rotation,
            translation=placement.translation,
            gt_surface=sample_surface(primitive, placement.scale, placement.z_rotation,
                                      placement.translation, config.surface_samples,
                                      child_rng(seed, "surface", i)),
        )
        for i, (primitive, placement) in enumerate(drafts, start=1)
    ]

    depths, instids, rgbs = _render_views(config, planes, instances, cameras)

    # Drop instances no camera sees well enough; removing them only uncovers others
    best = {inst.instance_id: max(int((ids == inst.instance_id).sum()) for ids in instids)
            for inst in instances}
    keep = [inst for inst in instances if best[inst.instance_id] >= config.min_pixels]
    if len(keep) < len(instances):
        log.debug(f"  seed {seed}: dropped {len(instances) - len(keep)} barely visible instance(s)")
        if len(keep) < config.min_instances:
            raise ForgeFailure(seed, len(keep), config.min_instances)
        instances = keep
        depths, instids, rgbs = _render_views(config, planes, instances, cameras)

    return SceneSample(
        scene_id=scene_id_for_seed(seed),
        seed=int(seed),
        planes=planes,
        instances=tuple(instances),
        cameras=cameras,
        depths=depths,
        instids=instids,
        rgbs=rgbs,
    )


def rasterize(scene: SceneSample, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    result = render(scene.planes, scene.instances, camera)
    return result.depth, result.instid


# ─────────────────────────────────────────────────────────────
# Occlusion statistics
# ─────────────────────────────────────────────────────────────

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return int(n)


def view_occlusion_table(sample: SceneSample) -> pd.DataFrame:
    """One row per (instance, view) with visible/projected pixels and components."""
    rows = []
    for inst in sample.instances:
        for v, (camera, ids) in enumerate(zip(sample.cameras, sample.instids)):
            visible = ids == inst.instance_id
            n_visible = int(visible.sum())
            n_projected = int(render_instance_mask(inst, camera).sum()) if n_visible else 0
            rows.append({
                "instance_id": inst.instance_id,
                "view": v,
                "visible_pixels": n_visible,
                "projected_pixels": n_projected,
                "visible_fraction": n_visible / n_projected if n_projected else 0.0,
                "components": count_components(visible) if n_visible else 0,
            })
    return pd.DataFrame(rows, columns=["instance_id", "view", "visible_pixels",
                                       "projected_pixels", "visible_fraction", "components"])


def occlusion_stats(sample: SceneSample) -> pd.DataFrame:
    """
    Per-instance visibility in its best view (most visible pixels).

    Instances invisible in every view report fraction 0 and 0 components.
    """
    table = view_occlusion_table(sample)
    if table.empty:
        return table.rename(columns={"view": "best_view"})
    best = table.sort_values(["instance_id", "visible_pixels", "view"],
                             ascending=[True, False, True]).groupby("instance_id").head(1)
    return best.rename(columns={"view": "best_view"}).reset_index(drop=True)
