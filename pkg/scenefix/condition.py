"""
Conditioning inputs of the stage models.

Raw per-instance inputs are gathered in numpy (``ConditionSource``) and then
encoded with the model's trainable encoders into a ``ConditionBundle``:

* partial grid: the fragment voxelized in the stage frame
* GAFP grid: per-pixel features sampled at the fragment's projections and
  mean-pooled per voxel
* depth-ratio / visibility embeddings (sinusoidal)
* instance image tokens (masked crop) and global geometry tokens (full view)

Bundles of one batch are stacked into a ``ConditionBatch`` for the models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from scenefix.errors import ContractViolation
from scenefix.geom_core import Camera, CubeFrame, PointCloud, voxel_indices, voxelize

log = logging.getLogger("scenefix.condition")

STAGES = ("coarse", "fine", "texture")
EMBED_FREQ_MAX = 1000.0


# ─────────────────────────────────────────────────────────────
# Ratio embedding
# ─────────────────────────────────────────────────────────────

def sinusoidal_embed(value: float, dim: int = 32) -> np.ndarray:
    """
    Interleaved ``[sin(f0 v), cos(f0 v), sin(f1 v), ...]`` with ``dim / 2``
    frequencies spaced geometrically from 1 to 1000.
    """
    if dim <= 0 or dim % 2:
        raise ContractViolation(f"embedding dim must be even and positive, got {dim}")
    k = dim // 2
    freqs = np.geomspace(1.0, EMBED_FREQ_MAX, k) if k > 1 else np.ones(1)
    angles = float(value) * freqs
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


@dataclass(frozen=True, eq=False)
class RatioEmbedding:
    value: float
    embedding: np.ndarray

    @classmethod
    def of(cls, value: float, dim: int) -> "RatioEmbedding":
        if not 0.0 <= value <= 1.0:
            raise ContractViolation(f"ratio must lie in [0, 1], got {value}")
        return cls(float(value), sinusoidal_embed(value, dim))


# ─────────────────────────────────────────────────────────────
# Geometry-aware feature projection
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FeatureGrid:
    frame: CubeFrame
    features: torch.Tensor          # (R, R, R, C), zero where nothing landed
    occupancy_mask: np.ndarray      # (R, R, R) bool
    dropped_points: int = 0


def gafp_project(feature_map: torch.Tensor, pc: PointCloud, camera: Camera,
                 frame: CubeFrame) -> FeatureGrid:
    """
    Sample ``feature_map`` (H, W, C) bilinearly at each point's projection and
    average the samples of the points falling in each voxel of ``frame``.

    Pixel (u, v) is sampled exactly at its center (u + 0.5, v + 0.5). Points
    projecting outside the raster or lying outside the frame are dropped and
    counted. The result is differentiable with respect to ``feature_map``.
    """
    h, w, c = feature_map.shape
    if (h, w) != (camera.height, camera.width):
        raise ContractViolation(f"feature map {h}x{w} does not match camera {camera.height}x{camera.width}")
    r = frame.resolution
    features = feature_map.new_zeros((r * r * r, c))
    mask = np.zeros((r, r, r), dtype=bool)
    if pc.is_empty:
        return FeatureGrid(frame, features.reshape(r, r, r, c), mask, 0)

    u, v, z = camera.project(pc.points)
    on_raster = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    in_frame = np.all(np.abs((pc.points - frame.center) / frame.side) <= 0.5, axis=1)
    keep = on_raster & in_frame
    dropped = int((~keep).sum())
    if not keep.any():
        return FeatureGrid(frame, features.reshape(r, r, r, c), mask, dropped)

    vox, _ = voxel_indices(PointCloud(pc.points[keep]), frame)
    x = u[keep] - 0.5
    y = v[keep] - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    flat = feature_map.reshape(h * w, c)
    sampled = feature_map.new_zeros((len(x), c))
    for dy, dx, weight in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                           (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        if not np.any(weight):
            continue
        yi = np.clip(y0 + dy, 0, h - 1)
        xi = np.clip(x0 + dx, 0, w - 1)
        idx = torch.as_tensor(yi * w + xi)
        wt = torch.as_tensor(weight, dtype=feature_map.dtype)[:, None]
        sampled = sampled + wt * flat[idx]

    cell = torch.as_tensor(vox[:, 0] * r * r + vox[:, 1] * r + vox[:, 2])
    sums = features.index_add(0, cell, sampled)
    counts = torch.zeros(r * r * r, dtype=feature_map.dtype).index_add(
        0, cell, torch.ones(len(cell), dtype=feature_map.dtype))
    pooled = sums / counts.clamp(min=1.0)[:, None]
    mask[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    return FeatureGrid(frame, pooled.reshape(r, r, r, c), mask, dropped)


# ─────────────────────────────────────────────────────────────
# Encoders
# ─────────────────────────────────────────────────────────────

class MixerLayer(nn.Module):
    """Token mixing then channel mixing, both residual."""

    def __init__(self, n_tokens: int, dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.token_mlp = nn.Sequential(nn.Linear(n_tokens, n_tokens * 2), nn.GELU(),
                                       nn.Linear(n_tokens * 2, n_tokens))
        self.norm2 = nn.LayerNorm(dim)
        self.channel_mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.token_mlp(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    """Square image (B, C, S, S) -> (B, (S/p)^2, D) tokens."""

    def __init__(self, in_channels: int, dim: int, crop_size: int = 64, patch: int = 8, layers: int = 2):
        super().__init__()
        if crop_size % patch:
            raise ContractViolation(f"crop size {crop_size} is not a multiple of patch {patch}")
        self.crop_size = crop_size
        self.n_tokens = (crop_size // patch) ** 2
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, self.n_tokens, dim) * 0.02)
        self.mixer = nn.Sequential(*[MixerLayer(self.n_tokens, dim) for _ in range(layers)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj(x).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.mixer(x))


class PixelFeatureEncoder(nn.Module):
    """Full-resolution per-pixel features from rgb + normalized depth."""

    def __init__(self, in_channels: int = 4, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass(frozen=True, eq=False)
class ConditionEncoders:
    """The modules that turn a ConditionSource into a bundle (owned by a model)."""

    instance: PatchEncoder
    global_: PatchEncoder
    pixel: PixelFeatureEncoder
    null_instance: nn.Parameter     # (1, L, D)
    null_global: nn.Parameter       # (1, L, D)
    ratio_dim: int

    @property
    def crop_size(self) -> int:
        return self.instance.crop_size


# ─────────────────────────────────────────────────────────────
# Raw inputs
# ─────────────────────────────────────────────────────────────

def square_crop(image: np.ndarray, mask: np.ndarray, size: int, pad: float = 0.1) -> np.ndarray:
    """Nearest-neighbour square crop (C, size, size) around the mask's bounding box."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    c = image.shape[0]
    if len(rows) == 0:
        return np.zeros((c, size, size), dtype=np.float32)
    cy = (rows[0] + rows[-1] + 1) / 2.0
    cx = (cols[0] + cols[-1] + 1) / 2.0
    side = max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1) * (1.0 + 2 * pad)
    side = max(side, 4.0)
    steps = (np.arange(size) + 0.5) * side / size - side / 2.0
    ys = np.floor(cy + steps).astype(np.int64)
    xs = np.floor(cx + steps).astype(np.int64)
    vy = (ys >= 0) & (ys < image.shape[1])
    vx = (xs >= 0) & (xs < image.shape[2])
    out = np.zeros((c, size, size), dtype=np.float32)
    out[np.ix_(np.arange(c), np.nonzero(vy)[0], np.nonzero(vx)[0])] = \
        image[np.ix_(np.arange(c), ys[vy], xs[vx])]
    return out


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return image[:, ys][:, :, xs].astype(np.float32)


def _normalized_depth(depth: np.ndarray) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float32)
    top = float(d.max()) if d.size else 0.0
    return d / top if top > 0 else np.zeros_like(d)


def instance_crop(rgb_u8: np.ndarray | None, mask: np.ndarray, size: int) -> np.ndarray:
    """(4, S, S): rgb under the mask plus the mask itself."""
    h, w = mask.shape
    rgb = np.zeros((3, h, w), dtype=np.float32) if rgb_u8 is None \
        else np.moveaxis(rgb_u8.astype(np.float32) / 255.0, -1, 0)
    m = mask.astype(np.float32)[None]
    return square_crop(np.concatenate([rgb * m, m], axis=0), mask, size)


@dataclass(frozen=True, eq=False)
class ConditionSource:
    """Everything a bundle is computed from, before any learned encoder runs."""

    stage: str
    frame: CubeFrame
    partial: np.ndarray             # (R, R, R) float32
    points: PointCloud              # fragment points (world)
    camera: Camera
    view_image: np.ndarray          # (4, H, W): rgb + normalized mixed depth
    instance_image: np.ndarray      # (4, S, S)
    global_view: np.ndarray         # (2, S, S): normalized depth + foreground mask
    alpha: float
    visibility: float | None = None


def prepare_source(fragment, stage: str, frame: CubeFrame, alpha: float,
                   visibility: float | None, crop_size: int) -> ConditionSource:
    if stage not in STAGES:
        raise ContractViolation(f"unknown stage {stage!r}")
    if stage == "texture" and visibility is None:
        raise ContractViolation("texture stage needs a visibility ratio")
    h, w = fragment.mask.shape
    rgb = np.zeros((3, h, w), dtype=np.float32) if fragment.rgb is None \
        else np.moveaxis(fragment.rgb.astype(np.float32) / 255.0, -1, 0)
    depth = _normalized_depth(fragment.depth)
    fg = (fragment.instid > 0).astype(np.float32)
    return ConditionSource(
        stage=stage,
        frame=frame,
        partial=voxelize(fragment.points, frame).occupancy,
        points=fragment.points,
        camera=fragment.camera,
        view_image=np.concatenate([rgb, depth[None]], axis=0),
        instance_image=instance_crop(fragment.rgb, fragment.mask, crop_size),
        global_view=resize_nearest(np.stack([depth, fg], axis=0), crop_size),
        alpha=float(alpha),
        visibility=None if stage != "texture" else float(visibility),
    )


# ─────────────────────────────────────────────────────────────
# Bundles
# ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TokenSeq:
    tokens: torch.Tensor            # (L, D)
    kind: str                       # "instance_image" | "global_geometry"


@dataclass(frozen=True, eq=False)
class ConditionBundle:
    stage: str
    partial_grid: torch.Tensor      # (R, R, R)
    gafp: FeatureGrid
    depth_ratio: RatioEmbedding | None
    visibility: RatioEmbedding | None
    instance_tokens: TokenSeq
    global_tokens: TokenSeq
    null_flag: bool = False

    @property
    def frame(self) -> CubeFrame:
        return self.gafp.frame


def encode_instance_image(crop: np.ndarray, encoders: ConditionEncoders) -> TokenSeq:
    x = torch.as_tensor(crop, dtype=encoders.null_instance.dtype)[None]
    return TokenSeq(encoders.instance(x)[0], "instance_image")


def encode_global_geometry(view: np.ndarray, encoders: ConditionEncoders) -> TokenSeq:
    x = torch.as_tensor(view, dtype=encoders.null_global.dtype)[None]
    return TokenSeq(encoders.global_(x)[0], "global_geometry")


def encode_source(source: ConditionSource, encoders: ConditionEncoders) -> ConditionBundle:
    dtype = encoders.null_instance.dtype
    feature_map = encoders.pixel(torch.as_tensor(source.view_image, dtype=dtype)[None])[0]
    gafp = gafp_project(feature_map.permute(1, 2, 0), source.points, source.camera, source.frame)
    visibility = None
    if source.stage == "texture":
        visibility = RatioEmbedding.of(source.visibility, encoders.ratio_dim)
    return ConditionBundle(
        stage=source.stage,
        partial_grid=torch.as_tensor(source.partial, dtype=dtype),
        gafp=gafp,
        depth_ratio=RatioEmbedding.of(source.alpha, encoders.ratio_dim),
        visibility=visibility,
        instance_tokens=encode_instance_image(source.instance_image, encoders),
        global_tokens=encode_global_geometry(source.global_view, encoders),
    )


def build_condition(fragment, stage: str, frame: CubeFrame, encoders: ConditionEncoders,
                    alpha: float, visibility: float | None = None) -> ConditionBundle:
    source = prepare_source(fragment, stage, frame, alpha, visibility, encoders.crop_size)
    return encode_source(source, encoders)


def null_bundle(stage: str, frame: CubeFrame, encoders: ConditionEncoders) -> ConditionBundle:
    """Classifier-free null condition: zero grids, no ratios, learned null tokens."""
    r = frame.resolution
    dtype = encoders.null_instance.dtype
    c = encoders.pixel.net[-1].out_channels
    gafp = FeatureGrid(frame, torch.zeros((r, r, r, c), dtype=dtype), np.zeros((r, r, r), dtype=bool))
    return ConditionBundle(
        stage=stage,
        partial_grid=torch.zeros((r, r, r), dtype=dtype),
        gafp=gafp,
        depth_ratio=None,
        visibility=None,
        instance_tokens=TokenSeq(encoders.null_instance[0], "instance_image"),
        global_tokens=TokenSeq(encoders.null_global[0], "global_geometry"),
        null_flag=True,
    )


@dataclass(frozen=True, eq=False)
class ConditionBatch:
    hint: torch.Tensor              # (B, 1 + C, R, R, R)
    depth_ratio: torch.Tensor       # (B, ratio_dim), zeros for null entries
    visibility: torch.Tensor        # (B, ratio_dim), zeros outside the texture stage
    instance_tokens: torch.Tensor   # (B, L, D)
    global_tokens: torch.Tensor     # (B, L, D)
    null: torch.Tensor              # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.hint.shape[0]


def collate_bundles(bundles, ratio_dim: int) -> ConditionBatch:
    bundles = list(bundles)
    if not bundles:
        raise ContractViolation("cannot collate zero bundles")
    frames = {b.frame.resolution for b in bundles}
    if len(frames) != 1:
        raise ContractViolation(f"bundles mix grid resolutions {sorted(frames)}")
    dtype = bundles[0].partial_grid.dtype

    def ratio(emb):
        if emb is None:
            return torch.zeros(ratio_dim, dtype=dtype)
        return torch.as_tensor(emb.embedding, dtype=dtype)

    hint = torch.stack([
        torch.cat([b.partial_grid[None], b.gafp.features.permute(3, 0, 1, 2)], dim=0)
        for b in bundles
    ])
    return ConditionBatch(
        hint=hint,
        depth_ratio=torch.stack([ratio(b.depth_ratio) for b in bundles]),
        visibility=torch.stack([ratio(b.visibility) for b in bundles]),
        instance_tokens=torch.stack([b.instance_tokens.tokens for b in bundles]),
        global_tokens=torch.stack([b.global_tokens.tokens for b in bundles]),
        null=torch.tensor([b.null_flag for b in bundles]),
    )


def tokens_only_batch(instance_tokens: torch.Tensor, resolution: int, hint_channels: int,
                      ratio_dim: int, null: torch.Tensor | None = None) -> ConditionBatch:
    """Batch carrying only instance tokens (for the base branch alone)."""
    b = instance_tokens.shape[0]
    dtype = instance_tokens.dtype
    zeros_ratio = torch.zeros((b, ratio_dim), dtype=dtype)
    return ConditionBatch(
        hint=torch.zeros((b, hint_channels, resolution, resolution, resolution), dtype=dtype),
        depth_ratio=zeros_ratio,
        visibility=zeros_ratio,
        instance_tokens=instance_tokens,
        global_tokens=instance_tokens,
        null=torch.zeros(b, dtype=torch.bool) if null is None else null,
    )
