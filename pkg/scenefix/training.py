"""
Training of the per-stage object priors and of the scene stage models.

Priors learn single complete primitives (random z-rotation and scale) in the
cube around the object, conditioned on a clean rendered crop. Stage models
start from their stage's prior, keep the base frozen and learn the control
branch on forged scenes with ``L_FM + lambda * L_AL``; the alignment term
compares their base-block features with those of the frozen prior fed the
same noised latent and the clean crop of the instance.

Batches are produced by a background thread into a bounded queue; the content
of batch ``k`` depends only on ``(seed, k)``.
"""

from __future__ import annotations

import copy
import logging
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from scenefix.condition import (
    ConditionSource,
    collate_bundles,
    encode_source,
    instance_crop,
    null_bundle,
    prepare_source,
    tokens_only_batch,
)
from scenefix.errors import ContractViolation, TrainingDivergence
from scenefix.flow_model import (
    BaseDenoiser,
    LossReport,
    ModelConfig,
    NoisedLatent,
    StageModel,
    flow_interpolate,
    fm_loss,
    orfa_loss,
    parameter_checksum,
)
from scenefix.geom_core import Camera, CubeFrame, compute_aabb, expand_bound, voxelize
from scenefix.rasterizer import render, rgb_to_u8
from scenefix.scene_forge import InstanceRecord, sample_primitive, sample_surface
from scenefix.seeding import child_rng, child_seed, torch_generator
from scenefix.view_decomp import ESTIMATOR_PROFILES, best_view, extract_fragment, grid_visibility_ratio

log = logging.getLogger("scenefix.train")

PRIOR_RASTER = 128
PRIOR_SURFACE_SAMPLES = 4096


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(2000, ge=1)
    pretrain_steps: int = Field(2000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    lambdas: dict[str, float] = {"coarse": 0.1, "fine": 0.5, "texture": 0.5}
    use_orfa: bool = True
    alpha_range: tuple[float, float] = (0.0, 1.0)
    severity: float = Field(0.1, ge=0)
    estimator_profiles: list[str] = list(ESTIMATOR_PROFILES)
    fine_frame_mode: Literal["gt_box", "expanded"] = "gt_box"
    expand_factor: float = Field(4.0, gt=0)
    prior_scale_range: tuple[float, float] = (0.5, 2.0)
    log_every: int = Field(50, ge=1)
    queue_size: int = Field(4, ge=1)


@dataclass(frozen=True, eq=False)
class TrainingExample:
    z0: np.ndarray                       # (C, R, R, R) latent target
    structure: np.ndarray | None         # (R, R, R) occupancy (texture stage)
    source: ConditionSource | None       # None for prior examples
    clean_crop: np.ndarray               # (4, S, S) clean render of the instance


# ─────────────────────────────────────────────────────────────
# Targets
# ─────────────────────────────────────────────────────────────

def stage_target(cfg: ModelConfig, instance, frame: CubeFrame) -> tuple[np.ndarray, np.ndarray | None]:
    """Latent target and structure grid of ``instance`` in ``frame``."""
    occ = voxelize(instance.gt_surface, frame).occupancy
    if cfg.stage == "texture":
        color = np.asarray(instance.base_color, dtype=np.float32)[:, None, None, None]
        return ((color * 2.0 - 1.0) * occ[None]).astype(np.float32), occ
    return (occ[None] * 2.0 - 1.0).astype(np.float32), None


def clean_crop(instance, camera: Camera, size: int) -> np.ndarray:
    """Crop of the instance rendered alone, nothing occluding it."""
    alone = render((), (instance,), camera, shade=True)
    return instance_crop(rgb_to_u8(alone.rgb), alone.instid > 0, size)


def prior_example(cfg: ModelConfig, rng: np.random.Generator, scale_range=(0.5, 2.0)) -> TrainingExample:
    """One complete primitive at the origin, randomly rotated about z and scaled."""
    primitive = sample_primitive(rng)
    scale = float(rng.uniform(*scale_range))
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    surface = sample_surface(primitive, scale, theta, np.zeros(3), PRIOR_SURFACE_SAMPLES, rng)
    instance = InstanceRecord(1, primitive, scale, theta, np.zeros(3), surface)

    box = instance.gt_box
    elevation = np.deg2rad(rng.uniform(20.0, 60.0))
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    distance = 1.2 * float(np.linalg.norm(box.extent)) / (2.0 * np.tan(np.deg2rad(25.0))) + box.max_side
    eye = box.center + distance * np.array([np.cos(elevation) * np.cos(azimuth),
                                            np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    camera = Camera.look_at(eye, box.center, PRIOR_RASTER, PRIOR_RASTER, 50.0)

    frame = CubeFrame.around(box, cfg.resolution)
    z0, structure = stage_target(cfg, instance, frame)
    return TrainingExample(z0, structure, None, clean_crop(instance, camera, cfg.crop_size))


def stage_frame(cfg: ModelConfig, tcfg: TrainConfig, instance, fragment) -> CubeFrame:
    if cfg.stage == "coarse" or (cfg.stage == "fine" and tcfg.fine_frame_mode == "expanded"):
        return CubeFrame(expand_bound(compute_aabb(fragment.points), tcfg.expand_factor), cfg.resolution)
    return CubeFrame.around(instance.gt_box, cfg.resolution)


def scene_example(cfg: ModelConfig, tcfg: TrainConfig, scenes, rng: np.random.Generator) -> TrainingExample:
    """A random instance of a random scene, seen through mixed depth."""
    sample = scenes[int(rng.integers(len(scenes)))]
    instance = sample.instances[int(rng.integers(len(sample.instances)))]
    view = best_view(sample, instance.instance_id)
    alpha = float(rng.uniform(*tcfg.alpha_range))
    profile = tcfg.estimator_profiles[int(rng.integers(len(tcfg.estimator_profiles)))]
    # forged instances already passed the dataset visibility threshold in their best view
    fragment = extract_fragment(sample, view, instance.instance_id, alpha, rng,
                                severity=tcfg.severity, profile=profile, min_pixels=1)
    frame = stage_frame(cfg, tcfg, instance, fragment)
    z0, structure = stage_target(cfg, instance, frame)
    visibility = None
    if cfg.stage == "texture":
        visibility = grid_visibility_ratio(voxelize(instance.gt_surface, frame), fragment.camera, fragment.depth)
    source = prepare_source(fragment, cfg.stage, frame, alpha, visibility, cfg.crop_size)
    return TrainingExample(z0, structure, source, clean_crop(instance, fragment.camera, cfg.crop_size))


# ─────────────────────────────────────────────────────────────
# Batch production
# ─────────────────────────────────────────────────────────────

def batch_stream(make_example, batch_size: int, seed: int, steps: int, queue_size: int = 4):
    """Yield ``steps`` batches built by a producer thread; batch k uses stream (seed, k)."""
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = threading.Event()

    def producer():
        for step in range(steps):
            if stop.is_set():
                return
            rng = child_rng(seed, "batch", step)
            try:
                item = [make_example(rng) for _ in range(batch_size)]
            except Exception as e:
                q.put(e)
                return
            q.put(item)
        q.put(None)

    thread = threading.Thread(target=producer, daemon=True, name="batch-producer")
    thread.start()
    try:
        while True:
            item = q.get()
            if item is None:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()


# ─────────────────────────────────────────────────────────────
# One step
# ─────────────────────────────────────────────────────────────

def _stack(arrays, dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrays), dtype=dtype)


def _teacher_batch(teacher: BaseDenoiser, examples, drop: np.ndarray, dtype):
    cfg = teacher.cfg
    tokens = teacher.instance_encoder(_stack([ex.clean_crop for ex in examples], dtype))
    return tokens_only_batch(tokens, cfg.resolution, cfg.hint_channels, cfg.ratio_dim,
                             null=torch.as_tensor(drop, dtype=torch.bool))


def _student_batch(model: StageModel, examples, drop: np.ndarray):
    encoders = model.encoders
    bundles = [
        null_bundle(model.cfg.stage, ex.source.frame, encoders) if d else encode_source(ex.source, encoders)
        for ex, d in zip(examples, drop)
    ]
    return collate_bundles(bundles, model.cfg.ratio_dim)


def train_step(model, teacher: BaseDenoiser | None, examples, optimizer, *, lam: float,
               use_orfa: bool, drop: np.ndarray, generator: torch.Generator, step: int = 0,
               grad_clip: float = 1.0, scheduler=None) -> LossReport:
    """
    One optimizer step on ``L_FM + lam * L_AL``.

    ``model`` is either a prior (trained on clean crops, ``teacher`` unused)
    or a StageModel (conditioned on the scene bundle). ``drop`` marks the
    examples whose condition is replaced by the null condition.
    """
    dtype = next(model.parameters()).dtype
    model.train()
    z0 = _stack([ex.z0 for ex in examples], dtype)
    structure = None
    if examples[0].structure is not None:
        structure = _stack([ex.structure for ex in examples], dtype)
    t = torch.rand(len(examples), generator=generator, dtype=torch.float32).to(dtype)
    eps = torch.randn(z0.shape, generator=generator, dtype=torch.float32).to(dtype)
    z_t, target = flow_interpolate(z0, eps, t)
    noised = NoisedLatent(z_t, t)

    if isinstance(model, StageModel):
        out = model(noised.z_t, noised.t, _student_batch(model, examples, drop), structure)
    else:
        out = model.denoise(noised.z_t, noised.t, _teacher_batch(model, examples, drop, dtype), structure)
    l_fm = fm_loss(out.velocity, target)

    l_al = None
    total = l_fm
    if use_orfa and teacher is not None:
        with torch.no_grad():
            t_out = teacher.denoise(noised.z_t, noised.t, _teacher_batch(teacher, examples, drop, dtype), structure)
        l_al = orfa_loss(out.layer_features, t_out.layer_features)
        total = l_fm + lam * l_al

    if not torch.isfinite(total):
        raise TrainingDivergence(step, float(l_fm), None if l_al is None else float(l_al), None)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for p in model.parameters() if p.requires_grad]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, grad_clip))
    if not np.isfinite(grad_norm):
        raise TrainingDivergence(step, float(l_fm), None if l_al is None else float(l_al), grad_norm)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return LossReport(
        l_fm=float(l_fm),
        l_al=None if l_al is None else float(l_al),
        total=float(total),
        lam=lam,
        grad_norm=grad_norm,
    )


# ─────────────────────────────────────────────────────────────
# Loops
# ─────────────────────────────────────────────────────────────

def _optimizer(model, tcfg: TrainConfig, steps: int):
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ContractViolation("model has no trainable parameters")
    opt = torch.optim.AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    return opt, sched


def run_training(model, teacher, make_example, tcfg: TrainConfig, *, steps: int, lam: float,
                 use_orfa: bool, seed: int, log_path=None, desc: str = "train") -> pd.DataFrame:
    """Train ``model`` in place and return the per-step log."""
    opt, sched = _optimizer(model, tcfg, steps)
    generator = torch_generator(child_seed(seed, "noise"))
    teacher_sum = parameter_checksum(teacher) if teacher is not None else None
    cfg_dropout = model.cfg.cfg_dropout
    rows = []
    batches = batch_stream(make_example, tcfg.batch_size, seed, steps, tcfg.queue_size)
    for step, examples in enumerate(tqdm(batches, total=steps, desc=desc, leave=False)):
        drop = child_rng(seed, "cfg_dropout", step).random(len(examples)) < cfg_dropout
        t0 = time.time()
        lr = opt.param_groups[0]["lr"]
        report = train_step(model, teacher, examples, opt, lam=lam, use_orfa=use_orfa, drop=drop,
                            generator=generator, step=step, grad_clip=tcfg.grad_clip, scheduler=sched)
        row = {"step": step, "l_fm": report.l_fm}
        if use_orfa and teacher is not None:
            row["l_al"] = report.l_al
        row.update({"total": report.total, "lr": lr, "grad_norm": report.grad_norm,
                    "seconds": round(time.time() - t0, 4)})
        rows.append(row)
        if step % tcfg.log_every == 0 or step == steps - 1:
            al = f"  l_al={report.l_al:+.4f}" if report.l_al is not None else ""
            log.info(f"  [{desc}] step {step:>6}/{steps}  l_fm={report.l_fm:.5f}{al}  "
                     f"grad={report.grad_norm:.3f}  lr={lr:.2e}")

    if teacher is not None and parameter_checksum(teacher) != teacher_sum:
        raise ContractViolation("frozen teacher weights changed during training")
    history = pd.DataFrame(rows)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        history.to_csv(log_path, index=False)
    model.eval()
    return history


def pretrain_prior(cfg: ModelConfig, tcfg: TrainConfig, seed: int, log_path=None):
    """Object prior for ``cfg.stage`` trained on single complete primitives."""
    torch.manual_seed(child_seed(seed, "init", cfg.stage, "prior"))
    prior = BaseDenoiser(cfg)
    history = run_training(
        prior, None, lambda rng: prior_example(cfg, rng, tcfg.prior_scale_range), tcfg,
        steps=tcfg.pretrain_steps, lam=0.0, use_orfa=False,
        seed=child_seed(seed, "pretrain", cfg.stage), log_path=log_path, desc=f"prior/{cfg.stage}",
    )
    return prior, history


def frozen_teacher(prior: BaseDenoiser) -> BaseDenoiser:
    teacher = copy.deepcopy(prior)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def train_stage(prior: BaseDenoiser, cfg: ModelConfig, tcfg: TrainConfig, scenes, seed: int,
                log_path=None):
    """Stage model fine-tuned on ``scenes`` from ``prior``."""
    if not scenes:
        raise ContractViolation("no training scenes")
    torch.manual_seed(child_seed(seed, "init", cfg.stage, "stage"))
    model = StageModel.from_prior(prior, cfg)
    teacher = frozen_teacher(prior)
    lam = tcfg.lambdas.get(cfg.stage, 0.0)
    history = run_training(
        model, teacher, lambda rng: scene_example(cfg, tcfg, scenes, rng), tcfg,
        steps=tcfg.steps, lam=lam, use_orfa=tcfg.use_orfa,
        seed=child_seed(seed, "stage", cfg.stage), log_path=log_path, desc=f"stage/{cfg.stage}",
    )
    return model, history
