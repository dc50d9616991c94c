"""
On-disk dataset format: one directory per scene.

    <root>/<scene_id>/manifest.json
    <root>/<scene_id>/view_{v}_depth.f32      H×W float32 LE, meters, 0 = no hit
    <root>/<scene_id>/view_{v}_instid.u16     H×W uint16 LE, 0 = background
    <root>/<scene_id>/view_{v}_rgb.ppm        optional binary PPM (P6)
    <root>/<scene_id>/inst_{id}_surface.f32   N×3 float32 LE world points

The manifest lists every binary file with its SHA-256; a scene is only
loaded after every size and checksum matches. Split membership lives in
``<root>/splits.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import ijson
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from scenefix.errors import DatasetLoadError
from scenefix.geom_core import AABB, Camera, PointCloud
from scenefix.scene_forge import (
    ForgeConfig,
    InstanceRecord,
    Primitive,
    SceneSample,
    forge_scene,
    occlusion_stats,
    view_occlusion_table,
)
from scenefix.solids import Plane

log = logging.getLogger("scenefix.dataset")

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS_NAME = "splits.json"


# ─────────────────────────────────────────────────────────────
# Manifest schema
# ─────────────────────────────────────────────────────────────

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlaneEntry(_Strict):
    kind: str
    center: list[float] = Field(min_length=3, max_length=3)
    normal: list[float] = Field(min_length=3, max_length=3)
    u_axis: list[float] = Field(min_length=3, max_length=3)
    half_u: float = Field(gt=0)
    half_v: float = Field(gt=0)


class InstanceEntry(_Strict):
    id: int = Field(gt=0, lt=65536)
    kind: str
    params: list[float]
    base_color: list[float] = Field(min_length=3, max_length=3)
    scale: float = Field(gt=0)
    z_rotation: float
    translation: list[float] = Field(min_length=3, max_length=3)
    gt_box: list[list[float]] = Field(min_length=2, max_length=2)
    surface_points: int = Field(gt=0)


class CameraEntry(_Strict):
    K: list[float] = Field(min_length=9, max_length=9)
    world_to_cam: list[float] = Field(min_length=16, max_length=16)
    width: int = Field(gt=0)
    height: int = Field(gt=0)


class SceneManifest(_Strict):
    scene_id: str
    seed: int
    schema_version: int
    planes: list[PlaneEntry]
    instances: list[InstanceEntry]
    cameras: list[CameraEntry]
    has_rgb: bool
    checksums: dict[str, str]


# ─────────────────────────────────────────────────────────────
# Encoding
# ─────────────────────────────────────────────────────────────

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_ppm(rgb_u8: np.ndarray) -> bytes:
    h, w, _ = rgb_u8.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb_u8, dtype=np.uint8).tobytes()


def decode_ppm(data: bytes, path: Path) -> np.ndarray:
    try:
        magic, dims, maxval, payload = data.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise DatasetLoadError(path, "malformed PPM header")
    if magic != b"P6" or maxval != b"255":
        raise DatasetLoadError(path, "only 8-bit P6 images are supported")
    if len(payload) != w * h * 3:
        raise DatasetLoadError(path, f"expected {w * h * 3} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_sample(sample: SceneSample) -> dict[str, bytes]:
    """Every file of the scene directory as bytes, manifest included."""
    files: dict[str, bytes] = {}
    for v, (depth, ids) in enumerate(zip(sample.depths, sample.instids)):
        files[f"view_{v}_depth.f32"] = np.ascontiguousarray(depth, dtype="<f4").tobytes()
        files[f"view_{v}_instid.u16"] = np.ascontiguousarray(ids, dtype="<u2").tobytes()
        if sample.rgbs is not None:
            files[f"view_{v}_rgb.ppm"] = encode_ppm(sample.rgbs[v])
    for inst in sample.instances:
        files[f"inst_{inst.instance_id}_surface.f32"] = \
            np.ascontiguousarray(inst.gt_surface.points, dtype="<f4").tobytes()

    manifest = {
        "scene_id": sample.scene_id,
        "seed": int(sample.seed),
        "schema_version": SCHEMA_VERSION,
        "planes": [p.to_dict() for p in sample.planes],
        "instances": [
            {
                "id": inst.instance_id,
                "kind": inst.primitive.kind,
                "params": [float(x) for x in inst.primitive.params],
                "base_color": [float(x) for x in inst.primitive.base_color],
                "scale": float(inst.scale),
                "z_rotation": float(inst.z_rotation),
                "translation": [float(x) for x in inst.translation],
                "gt_box": inst.gt_box.to_list(),
                "surface_points": len(inst.gt_surface),
            }
            for inst in sample.instances
        ],
        "cameras": [
            {
                "K": [float(x) for x in cam.intrinsics.ravel()],
                "world_to_cam": [float(x) for x in cam.world_to_cam.ravel()],
                "width": cam.width,
                "height": cam.height,
            }
            for cam in sample.cameras
        ],
        "has_rgb": sample.rgbs is not None,
        "checksums": {name: _sha256(data) for name, data in sorted(files.items())},
    }
    files[MANIFEST_NAME] = json.dumps(manifest, indent=2).encode("utf-8")
    return files


def write_sample(sample: SceneSample, root_dir) -> Path:
    scene_dir = Path(root_dir) / sample.scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    files = encode_sample(sample)
    # Binary files first so a manifest on disk always refers to complete data
    for name, data in files.items():
        if name != MANIFEST_NAME:
            (scene_dir / name).write_bytes(data)
    (scene_dir / MANIFEST_NAME).write_bytes(files[MANIFEST_NAME])
    return scene_dir


# ─────────────────────────────────────────────────────────────
# Decoding
# ─────────────────────────────────────────────────────────────

def load_manifest(scene_dir) -> SceneManifest:
    path = Path(scene_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetLoadError(path, "file not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetLoadError(path, f"invalid JSON ({e})")
    try:
        manifest = SceneManifest.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise DatasetLoadError(path, f"schema violation at {where}: {first['msg']}")
    if manifest.schema_version != SCHEMA_VERSION:
        raise DatasetLoadError(
            path, f"schema_version {manifest.schema_version}, expected {SCHEMA_VERSION}"
        )
    return manifest


def _read_checked(scene_dir: Path, name: str, manifest: SceneManifest, n_bytes: int | None) -> bytes:
    path = scene_dir / name
    if name not in manifest.checksums:
        raise DatasetLoadError(path, "file not listed in manifest checksums")
    if not path.exists():
        raise DatasetLoadError(path, "file not found")
    data = path.read_bytes()
    if n_bytes is not None and len(data) != n_bytes:
        raise DatasetLoadError(path, f"expected {n_bytes} bytes, found {len(data)}")
    if _sha256(data) != manifest.checksums[name]:
        raise DatasetLoadError(path, "checksum mismatch")
    return data


def read_sample(root_dir, scene_id: str) -> SceneSample:
    scene_dir = Path(root_dir) / scene_id
    manifest = load_manifest(scene_dir)
    manifest_path = scene_dir / MANIFEST_NAME
    if manifest.scene_id != scene_id:
        raise DatasetLoadError(manifest_path, f"scene_id {manifest.scene_id!r} != directory {scene_id!r}")

    try:
        cameras = tuple(
            Camera(np.array(c.K).reshape(3, 3), np.array(c.world_to_cam).reshape(4, 4), c.width, c.height)
            for c in manifest.cameras
        )
        planes = tuple(Plane.from_dict(p.model_dump()) for p in manifest.planes)
    except ValueError as e:
        raise DatasetLoadError(manifest_path, str(e))

    depths, instids, rgbs = [], [], []
    for v, cam in enumerate(cameras):
        n = cam.width * cam.height
        d = _read_checked(scene_dir, f"view_{v}_depth.f32", manifest, 4 * n)
        i = _read_checked(scene_dir, f"view_{v}_instid.u16", manifest, 2 * n)
        depths.append(np.frombuffer(d, dtype="<f4").astype(np.float32).reshape(cam.height, cam.width))
        instids.append(np.frombuffer(i, dtype="<u2").astype(np.uint16).reshape(cam.height, cam.width))
        if manifest.has_rgb:
            name = f"view_{v}_rgb.ppm"
            rgb = decode_ppm(_read_checked(scene_dir, name, manifest, None), scene_dir / name)
            if rgb.shape[:2] != (cam.height, cam.width):
                raise DatasetLoadError(scene_dir / name, f"image is {rgb.shape[:2]}, camera is {(cam.height, cam.width)}")
            rgbs.append(rgb)

    instances = []
    for entry in manifest.instances:
        name = f"inst_{entry.id}_surface.f32"
        data = _read_checked(scene_dir, name, manifest, 12 * entry.surface_points)
        pts = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 3)
        try:
            record = InstanceRecord(
                instance_id=entry.id,
                primitive=Primitive(entry.kind, tuple(entry.params), tuple(entry.base_color)),
                scale=entry.scale,
                z_rotation=entry.z_rotation,
                translation=np.array(entry.translation),
                gt_surface=PointCloud(pts),
            )
        except ValueError as e:
            raise DatasetLoadError(scene_dir / name, str(e))
        if record.gt_box != AABB.from_list(entry.gt_box):
            raise DatasetLoadError(manifest_path, f"gt_box of instance {entry.id} disagrees with its surface")
        instances.append(record)

    known = {inst.instance_id for inst in instances}
    for v, ids in enumerate(instids):
        stray = set(np.unique(ids).tolist()) - known - {0}
        if stray:
            raise DatasetLoadError(scene_dir / f"view_{v}_instid.u16", f"unknown instance ids {sorted(stray)}")

    return SceneSample(
        scene_id=manifest.scene_id,
        seed=manifest.seed,
        planes=planes,
        instances=tuple(instances),
        cameras=cameras,
        depths=tuple(depths),
        instids=tuple(instids),
        rgbs=tuple(rgbs) if manifest.has_rgb else None,
    )


def list_scene_ids(root_dir) -> list[str]:
    root = Path(root_dir)
    if not root.exists():
        return []
    return sorted(p.name for p in root.iterdir() if (p / MANIFEST_NAME).is_file())


# ─────────────────────────────────────────────────────────────
# Splits
# ─────────────────────────────────────────────────────────────

def split_for_seed(seed: int, modulus: int, buckets: dict) -> str:
    residue = int(seed) % modulus
    for name, residues in buckets.items():
        if residue in residues:
            return name
    raise ValueError(f"seed {seed} (residue {residue}) falls in no split")


def write_splits(root_dir, seeds_by_scene: dict[str, int], modulus: int, buckets: dict) -> Path:
    splits = {name: [] for name in buckets}
    for scene_id, seed in sorted(seeds_by_scene.items(), key=lambda kv: kv[1]):
        splits[split_for_seed(seed, modulus, buckets)].append(scene_id)
    path = Path(root_dir) / SPLITS_NAME
    path.write_text(json.dumps(splits, indent=2), encoding="utf-8")
    return path


def iter_split(root_dir, split: str):
    """Stream scene ids of one split without loading the whole file."""
    path = Path(root_dir) / SPLITS_NAME
    if not path.exists():
        raise DatasetLoadError(path, "file not found")
    with open(path, "rb") as f:
        yield from ijson.items(f, f"{split}.item")


def split_scene_ids(root_dir, split: str | None) -> list[str]:
    """Scene ids of ``split``; every scene on disk when ``split`` is None."""
    if split is None:
        return list_scene_ids(root_dir)
    return list(iter_split(root_dir, split))


# ─────────────────────────────────────────────────────────────
# Forging to disk
# ─────────────────────────────────────────────────────────────

def inventory_row(sample: SceneSample) -> dict:
    """One dataset_inventory.csv row: counts and occlusion statistics of a scene."""
    table = view_occlusion_table(sample)
    visible = table[table["visible_pixels"] > 0]
    best = occlusion_stats(sample)
    row = {
        "scene_id": sample.scene_id,
        "seed": sample.seed,
        "instances": len(sample.instances),
        "walls": sample.n_walls,
    }
    for v in range(sample.n_views):
        row[f"visible_view_{v}"] = int((visible["view"] == v).sum())
    row["mean_visible_fraction"] = float(best["visible_fraction"].mean()) if len(best) else 0.0
    row["masks_gt1_components"] = int((visible["components"] > 1).sum())
    row["masks_gt4_components"] = int((visible["components"] > 4).sum())
    return row


def forge_to_disk(config: ForgeConfig, seed: int, root_dir) -> dict:
    """Forge the scene of ``seed``, write it and return its inventory row."""
    sample = forge_scene(config, seed)
    write_sample(sample, root_dir)
    return inventory_row(sample)
