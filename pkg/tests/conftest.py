"""
pytest configuration: adds project root to sys.path so that
`config`, `scenefix` and the numbered scripts are importable from test files,
and provides the small fixtures most tests share.

Run:
    python -m pytest tests/ -v
    python -m pytest tests/ -v -m "not slow"
"""

import dataclasses
import importlib.util
import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from scenefix.errors import ForgeFailure  # noqa: E402
from scenefix.flow_model import ModelConfig  # noqa: E402
from scenefix.scene_forge import ForgeConfig, forge_scene  # noqa: E402

SCRIPTS_DIR = PROJECT_ROOT / "scripts"

# Visibility threshold of the small fixture scenes; settings that extract
# fragments from them use the same value.
SMALL_MIN_PIXELS = 4


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long seeded experiments (deselect with -m 'not slow')")


# ─────────────────────────────────────────────────────────────
# Numbered scripts (can't use normal import)
# ─────────────────────────────────────────────────────────────

def _load_script(filename: str):
    module_name = "script_" + Path(filename).stem.lstrip("0123456789_")
    spec = importlib.util.spec_from_file_location(module_name, SCRIPTS_DIR / filename)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture
def import_script():
    return _load_script


# ─────────────────────────────────────────────────────────────
# Scenes
# ─────────────────────────────────────────────────────────────

def small_forge_config(**overrides) -> ForgeConfig:
    settings = dict(
        width=48,
        height=48,
        n_cameras=2,
        n_candidates=10,
        min_instances=3,
        surface_samples=512,
        min_pixels=SMALL_MIN_PIXELS,
    )
    settings.update(overrides)
    return ForgeConfig(**settings)


def first_forgeable(config: ForgeConfig, start: int = 1, tries: int = 50):
    """First scene that forges from seed ``start`` on."""
    for seed in range(start, start + tries):
        try:
            return forge_scene(config, seed)
        except ForgeFailure:
            continue
    raise RuntimeError(f"no seed in [{start}, {start + tries}) forged a scene")


@pytest.fixture(scope="session")
def forge_config():
    return small_forge_config()


@pytest.fixture(scope="session")
def small_scene(forge_config):
    return first_forgeable(forge_config)


def with_sliver(sample, view: int, instance_id: int, keep: int):
    """Copy of ``sample`` where ``instance_id`` keeps only its first ``keep`` pixels in ``view``."""
    ids = sample.instids[view].copy()
    rows, cols = np.nonzero(ids == instance_id)
    ids[rows[keep:], cols[keep:]] = 0
    instids = tuple(ids if v == view else raster for v, raster in enumerate(sample.instids))
    return dataclasses.replace(sample, instids=instids)


def largest_in_view(sample, view: int) -> int:
    ids, counts = np.unique(sample.instids[view], return_counts=True)
    counts = np.where(ids == 0, -1, counts)
    return int(ids[np.argmax(counts)])


# ─────────────────────────────────────────────────────────────
# Models
# ─────────────────────────────────────────────────────────────

TINY_MODEL = dict(
    resolution=8,
    width=16,
    heads=2,
    base_depth=2,
    control_depth=1,
    token_dim=8,
    ratio_dim=8,
    gafp_channels=4,
    crop_size=16,
    token_patch=8,
)


def tiny_model_config(stage: str, **overrides) -> ModelConfig:
    return ModelConfig(stage=stage, **{**TINY_MODEL, **overrides})


@pytest.fixture
def tiny_configs():
    return {stage: tiny_model_config(stage) for stage in ("coarse", "fine", "texture")}
