"""
Z-buffer rendering of forged scenes by analytic per-pixel ray casting.

One ray per pixel center is intersected with every plane and with every
instance's solids (in the instance's local frame). The nearest hit wins; a
tie keeps the surface drawn first. Planes are drawn first with id 0, then
instances in ascending id, so ties resolve to the lower id.

Rays come from ``Camera.pixel_rays`` whose directions have unit camera-z, so
the hit parameter is directly the z-depth stored in the depth raster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from scenefix.geom_core import Camera

log = logging.getLogger("scenefix.raster")

AMBIENT = 0.3
LIGHT_DIRECTION = np.array([0.4, 0.3, -1.0]) / np.linalg.norm([0.4, 0.3, -1.0])
PLANE_COLORS = {
    "floor": np.array([0.55, 0.55, 0.55]),
    "wall": np.array([0.78, 0.75, 0.70]),
}


@dataclass(frozen=True, eq=False)
class RenderResult:
    depth: np.ndarray           # (H, W) float32, 0 = no hit
    instid: np.ndarray          # (H, W) uint16, 0 = floor / walls / background
    rgb: np.ndarray | None      # (H, W, 3) float32 in [0, 1]


# ─────────────────────────────────────────────────────────────
# Instance transforms (uniform scale, rotation about z, translation)
# ─────────────────────────────────────────────────────────────

def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def local_to_world(points: np.ndarray, scale: float, theta: float, translation) -> np.ndarray:
    return scale * (np.asarray(points) @ rotation_z(theta).T) + np.asarray(translation)


def world_to_local_rays(origin, dirs, scale: float, theta: float, translation):
    """Express world rays in the local frame; the ray parameter is unchanged."""
    rot = rotation_z(theta)
    o = ((np.asarray(origin) - np.asarray(translation)) @ rot) / scale
    d = (dirs @ rot) / scale
    return o, d


# ─────────────────────────────────────────────────────────────
# Rendering
# ─────────────────────────────────────────────────────────────

def _candidate_pixels(world_box, camera: Camera) -> np.ndarray:
    """Flat indices of pixels whose rays may hit anything inside ``world_box``."""
    lo, hi = world_box.min_corner, world_box.max_corner
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    u, v, z = camera.project(corners)
    n_pix = camera.width * camera.height
    if np.any(z <= 1e-6):
        return np.arange(n_pix)
    u0 = int(np.clip(np.floor(u.min()) - 1, 0, camera.width))
    u1 = int(np.clip(np.ceil(u.max()) + 1, 0, camera.width))
    v0 = int(np.clip(np.floor(v.min()) - 1, 0, camera.height))
    v1 = int(np.clip(np.ceil(v.max()) + 1, 0, camera.height))
    if u0 >= u1 or v0 >= v1:
        return np.zeros(0, dtype=np.int64)
    vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
    return (vv * camera.width + uu).ravel()


def _shade(color: np.ndarray, normals: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # Flip normals to face the viewer before the Lambert term
    facing = np.where((np.einsum("ij,ij->i", normals, dirs) > 0)[:, None], -normals, normals)
    lambert = np.clip(facing @ -LIGHT_DIRECTION, 0.0, None)
    return np.clip(color * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None], 0.0, 1.0)


def render(planes, instances, camera: Camera, *, shade: bool = False) -> RenderResult:
    """
    Render depth, instance ids and (optionally) shaded rgb for one camera.

    ``instances`` are objects exposing ``instance_id``, ``parts``, ``scale``,
    ``z_rotation``, ``translation``, ``world_box`` and ``base_color``.
    """
    origin, dirs = camera.pixel_rays()
    flat_dirs = dirs.reshape(-1, 3)
    n_pix = len(flat_dirs)
    origins = np.broadcast_to(origin, flat_dirs.shape)

    best_t = np.full(n_pix, np.inf)
    best_id = np.zeros(n_pix, dtype=np.int64)
    best_rgb = np.zeros((n_pix, 3)) if shade else None

    for plane in planes:
        t, normals = plane.intersect(origins, flat_dirs)
        win = t < best_t
        best_t[win] = t[win]
        best_id[win] = 0
        if shade and win.any():
            color = PLANE_COLORS.get(plane.kind, PLANE_COLORS["wall"])
            best_rgb[win] = _shade(color, normals[win], flat_dirs[win])

    for inst in sorted(instances, key=lambda i: i.instance_id):
        rows = _candidate_pixels(inst.world_box, camera)
        if len(rows) == 0:
            continue
        o_loc, d_loc = world_to_local_rays(origin, flat_dirs[rows], inst.scale,
                                           inst.z_rotation, inst.translation)
        o_loc = np.broadcast_to(o_loc, d_loc.shape)
        t_inst = np.full(len(rows), np.inf)
        n_inst = np.zeros((len(rows), 3))
        for part in inst.parts:
            t, normals = part.intersect(o_loc, d_loc)
            closer = t < t_inst
            t_inst[closer] = t[closer]
            n_inst[closer] = normals[closer]
        win = t_inst < best_t[rows]
        if not win.any():
            continue
        hit_rows = rows[win]
        best_t[hit_rows] = t_inst[win]
        best_id[hit_rows] = inst.instance_id
        if shade:
            n_world = n_inst[win] @ rotation_z(inst.z_rotation).T
            best_rgb[hit_rows] = _shade(np.asarray(inst.base_color), n_world, flat_dirs[hit_rows])

    shape = (camera.height, camera.width)
    depth = np.where(np.isfinite(best_t), best_t, 0.0).astype(np.float32).reshape(shape)
    instid = best_id.astype(np.uint16).reshape(shape)
    rgb = best_rgb.astype(np.float32).reshape(shape + (3,)) if shade else None
    return RenderResult(depth, instid, rgb)


def render_instance_mask(instance, camera: Camera) -> np.ndarray:
    """Pixels the instance would cover with every other surface removed."""
    return render((), (instance,), camera).instid > 0


def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
