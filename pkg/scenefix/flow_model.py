"""
Dual-branch rectified-flow denoiser.

* ``BaseDenoiser`` is the object prior: a 3D DiT over patchified grids,
  time-conditioned with adaptive layer norm and cross-attending to instance
  image tokens. It is pretrained per stage on single, complete primitives.
* ``StageModel`` wraps a frozen copy of the prior with a trainable control
  branch: a copy of the first K prior blocks that reads the noised grid plus
  the partial/GAFP hint grid, adds the depth-ratio (and visibility) embedding
  to its tokens and cross-attends to global geometry tokens. Each control
  block's output goes through a zero-initialized projection and is added to
  the input of the matching base block, so a fresh StageModel reproduces its
  prior exactly.

Flow convention: ``z_t = (1 - t) z0 + t eps`` with velocity target
``eps - z0``; sampling integrates from t = 1 (noise) to t = 0.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from scenefix.condition import (
    ConditionBatch,
    ConditionEncoders,
    PatchEncoder,
    PixelFeatureEncoder,
)
from scenefix.errors import ContractViolation

log = logging.getLogger("scenefix.model")

STAGE_SHAPES = {
    # stage: (resolution, channels, patch)
    "coarse": (16, 1, 2),
    "fine": (32, 1, 4),
    "texture": (32, 3, 4),
}
IMAGE_CHANNELS = 4          # rgb + mask (instance crop) / rgb + depth (pixel features)
GLOBAL_CHANNELS = 2         # normalized depth + foreground mask


# ─────────────────────────────────────────────────────────────
# Configuration
# ─────────────────────────────────────────────────────────────

class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage: Literal["coarse", "fine", "texture"]
    resolution: int | None = None
    channels: int | None = None
    patch_size: int | None = None
    base_depth: int = Field(8, ge=1)
    control_depth: int = Field(4, ge=1)
    width: int = Field(128, ge=2)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    token_dim: int = Field(64, ge=2)
    ratio_dim: int = Field(32, ge=2)
    gafp_channels: int = Field(32, ge=1)
    crop_size: int = Field(64, ge=4)
    token_patch: int = Field(8, ge=1)
    cfg_dropout: float = Field(0.1, ge=0.0, le=1.0)
    use_depth_ratio: bool = True
    use_global_tokens: bool = True
    freeze_base: bool = True
    probe_layers: list[int] | None = None       # None = every base block

    @model_validator(mode="after")
    def _fill_and_check(self):
        res, ch, patch = STAGE_SHAPES[self.stage]
        if self.resolution is None:
            self.resolution = res
        if self.channels is None:
            self.channels = ch
        if self.patch_size is None:
            self.patch_size = patch
        if self.control_depth > self.base_depth:
            raise ValueError(f"control_depth {self.control_depth} exceeds base_depth {self.base_depth}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.resolution % self.patch_size:
            raise ValueError(f"resolution {self.resolution} is not a multiple of patch {self.patch_size}")
        if self.crop_size % self.token_patch:
            raise ValueError(f"crop_size {self.crop_size} is not a multiple of token_patch {self.token_patch}")
        if self.ratio_dim % 2:
            raise ValueError("ratio_dim must be even")
        if self.probe_layers is not None and any(not 0 <= i < self.base_depth for i in self.probe_layers):
            raise ValueError("probe_layers must index base blocks")
        return self

    @property
    def structure_channels(self) -> int:
        return 1 if self.stage == "texture" else 0

    @property
    def hint_channels(self) -> int:
        return 1 + self.gafp_channels

    @property
    def tokens_per_axis(self) -> int:
        return self.resolution // self.patch_size

    @property
    def probes(self) -> list[int]:
        return list(range(self.base_depth)) if self.probe_layers is None else list(self.probe_layers)

    def latent_shape(self, batch: int = 1) -> tuple[int, ...]:
        r = self.resolution
        return (batch, self.channels, r, r, r)


@dataclass(frozen=True, eq=False)
class NoisedLatent:
    z_t: torch.Tensor
    t: torch.Tensor


@dataclass(frozen=True, eq=False)
class DenoiserOutput:
    velocity: torch.Tensor
    layer_features: list


@dataclass(frozen=True)
class LossReport:
    l_fm: float
    l_al: float | None
    total: float
    lam: float
    grad_norm: float | None = None


# ─────────────────────────────────────────────────────────────
# Building blocks
# ─────────────────────────────────────────────────────────────

def sincos_pos_embed_3d(dim: int, n: int) -> torch.Tensor:
    """Fixed (n^3, dim) embedding; each axis gets an equal share of sin/cos pairs."""
    per_axis = (dim // 6) * 2
    out = torch.zeros(n, n, n, dim)
    if per_axis == 0:
        return out.reshape(n ** 3, dim)
    half = per_axis // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / max(half - 1, 1))
    pos = torch.arange(n, dtype=torch.float32)[:, None] * freqs[None]
    axis_emb = torch.cat([torch.sin(pos), torch.cos(pos)], dim=-1)      # (n, per_axis)
    out[..., 0:per_axis] = axis_emb[:, None, None, :]
    out[..., per_axis:2 * per_axis] = axis_emb[None, :, None, :]
    out[..., 2 * per_axis:3 * per_axis] = axis_emb[None, None, :, :]
    return out.reshape(n ** 3, dim)


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = max(self.dim // 2, 1)
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=t.dtype) / max(half - 1, 1))
        angles = 1000.0 * t[:, None] * freqs[None]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)[:, : self.dim]
        if emb.shape[1] < self.dim:
            emb = F.pad(emb, (0, self.dim - emb.shape[1]))
        return self.mlp(emb)


class AdaLN(nn.Module):
    """LayerNorm modulated by a scale/shift predicted from the time embedding."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.proj = nn.Linear(cond_dim, dim * 2)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, token_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, kdim=token_dim, vdim=token_dim, batch_first=True)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        out, _ = self.attn(self.norm(x), tokens, tokens, need_weights=False)
        return out


class DiTBlock(nn.Module):
    """Self-attention, cross-attention to condition tokens and MLP, all residual."""

    def __init__(self, dim: int, heads: int, token_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = AdaLN(dim, dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross = CrossAttention(dim, heads, token_dim)
        self.norm2 = AdaLN(dim, dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, cond: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x, cond)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.cross(x, tokens)
        return x + self.mlp(self.norm2(x, cond))


def _zero_linear(dim_in: int, dim_out: int) -> nn.Linear:
    layer = nn.Linear(dim_in, dim_out)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


# ─────────────────────────────────────────────────────────────
# Base branch (object prior)
# ─────────────────────────────────────────────────────────────

class BaseDenoiser(nn.Module):
    kind = "prior"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        p, w = cfg.patch_size, cfg.width
        self.patch_embed = nn.Conv3d(cfg.channels + cfg.structure_channels, w, kernel_size=p, stride=p)
        self.register_buffer("pos_embed", sincos_pos_embed_3d(w, cfg.tokens_per_axis), persistent=False)
        self.time_embed = TimestepEmbedding(w)
        self.instance_encoder = PatchEncoder(IMAGE_CHANNELS, cfg.token_dim, cfg.crop_size, cfg.token_patch)
        self.null_instance = nn.Parameter(torch.randn(1, self.instance_encoder.n_tokens, cfg.token_dim) * 0.02)
        self.blocks = nn.ModuleList([
            DiTBlock(w, cfg.heads, cfg.token_dim, cfg.mlp_ratio) for _ in range(cfg.base_depth)
        ])
        self.feature_norm = nn.LayerNorm(w, elementwise_affine=False)
        self.final_norm = nn.LayerNorm(w)
        self.final_proj = _zero_linear(w, p ** 3 * cfg.channels)
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear) and module is not self.final_proj:
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def embed(self, z_t: torch.Tensor, structure: torch.Tensor | None) -> torch.Tensor:
        cfg = self.cfg
        if z_t.shape[1:] != self.cfg.latent_shape()[1:]:
            raise ContractViolation(f"latent shape {tuple(z_t.shape)} does not match {cfg.latent_shape()}")
        if cfg.structure_channels:
            if structure is None:
                raise ContractViolation("texture stage needs the structure grid")
            z_t = torch.cat([z_t, structure.to(z_t.dtype).unsqueeze(1)], dim=1)
        return self.patch_embed(z_t).flatten(2).transpose(1, 2) + self.pos_embed.to(z_t.dtype)

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        n, p, c = self.cfg.tokens_per_axis, self.cfg.patch_size, self.cfg.channels
        x = x.view(b, n, n, n, p, p, p, c)
        x = x.permute(0, 7, 1, 4, 2, 5, 3, 6)
        return x.reshape(b, c, n * p, n * p, n * p)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, instance_tokens: torch.Tensor,
                structure: torch.Tensor | None = None, injections=None) -> DenoiserOutput:
        x = self.embed(z_t, structure)
        cond = self.time_embed(t.to(x.dtype))
        features = []
        for i, block in enumerate(self.blocks):
            if injections is not None and i < len(injections):
                x = x + injections[i]
            x = block(x, cond, instance_tokens)
            features.append(self.feature_norm(x))
        velocity = self.unpatchify(self.final_proj(self.final_norm(x)))
        return DenoiserOutput(velocity, [features[i] for i in self.cfg.probes])

    def denoise(self, z_t, t, cond: ConditionBatch, structure=None) -> DenoiserOutput:
        tokens = torch.where(cond.null[:, None, None], self.null_instance.to(cond.instance_tokens.dtype),
                             cond.instance_tokens)
        return self(z_t, t, tokens, structure)


# ─────────────────────────────────────────────────────────────
# Control branch and stage model
# ─────────────────────────────────────────────────────────────

class ControlBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, base: BaseDenoiser):
        super().__init__()
        self.cfg = cfg
        w, p = cfg.width, cfg.patch_size
        self.patch_embed = copy.deepcopy(base.patch_embed)
        self.blocks = nn.ModuleList([copy.deepcopy(base.blocks[i]) for i in range(cfg.control_depth)])
        self.hint_embed = nn.Conv3d(cfg.hint_channels, w, kernel_size=p, stride=p)
        nn.init.zeros_(self.hint_embed.weight)
        nn.init.zeros_(self.hint_embed.bias)
        self.ratio_proj = nn.Linear(cfg.ratio_dim, w)
        self.visibility_proj = nn.Linear(cfg.ratio_dim, w) if cfg.stage == "texture" else None
        self.global_attn = nn.ModuleList([
            CrossAttention(w, cfg.heads, cfg.token_dim) for _ in range(cfg.control_depth)
        ])
        self.global_encoder = PatchEncoder(GLOBAL_CHANNELS, cfg.token_dim, cfg.crop_size, cfg.token_patch)
        self.pixel_encoder = PixelFeatureEncoder(IMAGE_CHANNELS, cfg.gafp_channels)
        self.null_global = nn.Parameter(torch.randn(1, self.global_encoder.n_tokens, cfg.token_dim) * 0.02)
        self.injections = nn.ModuleList([_zero_linear(w, w) for _ in range(cfg.control_depth)])

    def reset_from(self, base: BaseDenoiser):
        """Re-copy the trunk from ``base`` (after the base weights were loaded)."""
        self.patch_embed.load_state_dict(base.patch_embed.state_dict())
        for i, block in enumerate(self.blocks):
            block.load_state_dict(base.blocks[i].state_dict())

    def forward(self, z_t, time_cond, cond: ConditionBatch, instance_tokens, structure, base: BaseDenoiser):
        cfg = self.cfg
        dtype = z_t.dtype
        if cfg.structure_channels:
            if structure is None:
                raise ContractViolation("texture stage needs the structure grid")
            z_t = torch.cat([z_t, structure.to(dtype).unsqueeze(1)], dim=1)
        x = self.patch_embed(z_t).flatten(2).transpose(1, 2) + base.pos_embed.to(dtype)
        x = x + self.hint_embed(cond.hint.to(dtype)).flatten(2).transpose(1, 2)
        if cfg.use_depth_ratio:
            x = x + self.ratio_proj(cond.depth_ratio.to(dtype))[:, None]
        if self.visibility_proj is not None:
            x = x + self.visibility_proj(cond.visibility.to(dtype))[:, None]
        global_tokens = torch.where(cond.null[:, None, None], self.null_global.to(dtype),
                                    cond.global_tokens.to(dtype))
        out = []
        for block, attn, proj in zip(self.blocks, self.global_attn, self.injections):
            x = block(x, time_cond, instance_tokens)
            if cfg.use_global_tokens:
                x = x + attn(x, global_tokens)
            out.append(proj(x))
        return out


class StageModel(nn.Module):
    kind = "stage"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.base = BaseDenoiser(cfg)
        self.control = ControlBranch(cfg, self.base)
        self.apply_freeze()

    @classmethod
    def from_prior(cls, prior: BaseDenoiser, cfg: ModelConfig | None = None) -> "StageModel":
        """Stage model whose base (and control trunk) start from the prior's weights."""
        cfg = cfg or prior.cfg
        if cfg.stage != prior.cfg.stage:
            raise ContractViolation(f"prior is for stage {prior.cfg.stage}, not {cfg.stage}")
        model = cls(cfg)
        model.base.load_state_dict(prior.state_dict())
        model.control.reset_from(model.base)
        model.apply_freeze()
        return model

    def apply_freeze(self):
        for param in self.base.parameters():
            param.requires_grad_(not self.cfg.freeze_base)

    @property
    def encoders(self) -> ConditionEncoders:
        return ConditionEncoders(
            instance=self.base.instance_encoder,
            global_=self.control.global_encoder,
            pixel=self.control.pixel_encoder,
            null_instance=self.base.null_instance,
            null_global=self.control.null_global,
            ratio_dim=self.cfg.ratio_dim,
        )

    def _instance_tokens(self, cond: ConditionBatch) -> torch.Tensor:
        return torch.where(cond.null[:, None, None], self.base.null_instance.to(cond.instance_tokens.dtype),
                           cond.instance_tokens)

    def forward(self, z_t, t, cond: ConditionBatch, structure=None) -> DenoiserOutput:
        tokens = self._instance_tokens(cond)
        time_cond = self.base.time_embed(t.to(z_t.dtype))
        injections = self.control(z_t, time_cond, cond, tokens, structure, self.base)
        return self.base(z_t, t, tokens, structure, injections)

    def denoise(self, z_t, t, cond: ConditionBatch, structure=None) -> DenoiserOutput:
        return self(z_t, t, cond, structure)

    def base_only(self, z_t, t, cond: ConditionBatch, structure=None) -> DenoiserOutput:
        return self.base(z_t, t, self._instance_tokens(cond), structure)


# ─────────────────────────────────────────────────────────────
# Objective and sampling
# ─────────────────────────────────────────────────────────────

def _broadcast_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    return t.view(-1, *([1] * (like.ndim - 1)))


def flow_interpolate(z0: torch.Tensor, eps: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    if z0.shape != eps.shape:
        raise ContractViolation(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    tt = _broadcast_t(t, z0)
    if torch.any((tt < 0) | (tt > 1)):
        raise ContractViolation("t must lie in [0, 1]")
    return (1 - tt) * z0 + tt * eps, eps - z0


def fm_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractViolation(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return F.mse_loss(pred, target)


def orfa_loss(student_features, teacher_features) -> torch.Tensor:
    """
    Negative mean token-wise cosine similarity, averaged over layers.

    A zero-norm token has cosine 0 with anything.
    """
    if len(student_features) != len(teacher_features) or not student_features:
        raise ContractViolation("feature lists must be non-empty and of equal length")
    sims = []
    for hs, h in zip(student_features, teacher_features):
        if hs.shape != h.shape:
            raise ContractViolation(f"layer shapes differ: {tuple(hs.shape)} vs {tuple(h.shape)}")
        sims.append(F.cosine_similarity(hs, h, dim=-1, eps=1e-12).mean())
    return -torch.stack(sims).mean()


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if v_uncond.shape != v_cond.shape:
        raise ContractViolation("velocities must share a shape")
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


@torch.no_grad()
def sample(model, cond: ConditionBatch, null_cond: ConditionBatch | None, *, steps: int = 25,
           cfg_scale: float = 5.0, generator: torch.Generator | None = None,
           structure: torch.Tensor | None = None) -> torch.Tensor:
    """
    Euler integration from noise (t = 1) to data (t = 0) with uniform steps.

    The unconditional pass is skipped when ``cfg_scale`` is 1.
    """
    if steps < 1:
        raise ContractViolation("steps must be >= 1")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    z = torch.randn(cfg.latent_shape(cond.batch_size), generator=generator, dtype=torch.float32).to(dtype)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((cond.batch_size,), 1.0 - k * dt, dtype=dtype)
        v = model.denoise(z, t, cond, structure).velocity
        if cfg_scale != 1.0:
            if null_cond is None:
                raise ContractViolation("guidance needs a null condition")
            v_u = model.denoise(z, t, null_cond, structure).velocity
            v = cfg_combine(v_u, v, cfg_scale)
        z = z - dt * v
    return z


def occupancy_to_latent(occ: torch.Tensor) -> torch.Tensor:
    return occ * 2.0 - 1.0


def latent_to_occupancy(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def rgb_to_latent(rgb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """(B, 3, R, R, R) colors in [0, 1] -> latent, zero outside the mask."""
    return (rgb * 2.0 - 1.0) * mask.unsqueeze(1)


def latent_to_rgb(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
