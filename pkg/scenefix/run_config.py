"""
Run configuration: one JSON file plus ``dot.path=value`` overrides.

Every command validates the full RunConfig before touching the disk; a failed
validation raises ConfigError naming the schema path, e.g.
``train.steps: Input should be greater than or equal to 1``.
"""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from scenefix.completion_pipeline import InferenceSettings
from scenefix.errors import ConfigError
from scenefix.eval_metrics import MetricConfig
from scenefix.flow_model import ModelConfig
from scenefix.scene_forge import ForgeConfig
from scenefix.training import TrainConfig

STAGES = ("coarse", "fine", "texture")
ABLATION_ARMS = ("full", "c2f_off", "al_off", "k2", "k6", "ratio_off", "global_off", "single_depth", "unfreeze")


def _env(name: str):
    import config
    return getattr(config, name)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset_root: str = Field(default_factory=lambda: str(_env("DATASET_ROOT")))
    runs_dir: str = Field(default_factory=lambda: str(_env("RUNS_DIR")))
    reports_dir: str = Field(default_factory=lambda: str(_env("REPORTS_DIR")))


class StageConfigs(BaseModel):
    model_config = ConfigDict(extra="forbid")

    coarse: ModelConfig = Field(default_factory=lambda: ModelConfig(stage="coarse"))
    fine: ModelConfig = Field(default_factory=lambda: ModelConfig(stage="fine"))
    texture: ModelConfig = Field(default_factory=lambda: ModelConfig(stage="texture"))

    @model_validator(mode="before")
    @classmethod
    def _default_stage(cls, data):
        if isinstance(data, dict):
            data = {k: ({"stage": k, **v} if isinstance(v, dict) else v) for k, v in data.items()}
        return data

    @model_validator(mode="after")
    def _stages_match(self):
        for name in STAGES:
            if getattr(self, name).stage != name:
                raise ValueError(f"{name} slot holds a {getattr(self, name).stage} config")
        return self

    def of(self, stage: str) -> ModelConfig:
        return getattr(self, stage)


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arms: list[str] = ["full", "c2f_off", "al_off", "k2", "k6"]

    @model_validator(mode="after")
    def _known_arms(self):
        unknown = [a for a in self.arms if a not in ABLATION_ARMS]
        if unknown:
            raise ValueError(f"unknown ablation arms {unknown}; choose from {list(ABLATION_ARMS)}")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("ablation arms must be unique")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: int(_env("DEFAULT_SEED")))
    deterministic_mode: bool = Field(default_factory=lambda: bool(_env("DETERMINISTIC_MODE")))
    workers: int = Field(default_factory=lambda: int(_env("WORKERS")), ge=1)
    scenes: int = Field(50, ge=1)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    forge: ForgeConfig = Field(default_factory=ForgeConfig)
    models: StageConfigs = Field(default_factory=StageConfigs)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceSettings = Field(default_factory=InferenceSettings)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @property
    def dataset_root(self) -> Path:
        return Path(self.paths.dataset_root)

    @property
    def runs_dir(self) -> Path:
        return Path(self.paths.runs_dir)

    @property
    def reports_dir(self) -> Path:
        return Path(self.paths.reports_dir)


# ─────────────────────────────────────────────────────────────
# Loading
# ─────────────────────────────────────────────────────────────

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Set ``a.b.c=value`` entries into the nested dict ``data`` (in place)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, _, raw = item.partition("=")
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def _format_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def validate_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


def load_run_config(path=None, overrides=None) -> RunConfig:
    """RunConfig from an optional JSON file with CLI overrides applied on top."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return validate_run_config(apply_overrides(data, overrides))


def arm_config(run: RunConfig, arm: str) -> RunConfig:
    """The run configuration of one ablation arm."""
    if arm not in ABLATION_ARMS:
        raise ConfigError(f"ablation.arms: unknown arm {arm!r}")
    data = run.model_dump(mode="json")
    model_patch = {
        "k2": {"control_depth": 2},
        "k6": {"control_depth": 6},
        "ratio_off": {"use_depth_ratio": False},
        "global_off": {"use_global_tokens": False},
        "unfreeze": {"freeze_base": False},
    }.get(arm)
    if model_patch:
        for stage in STAGES:
            data["models"][stage].update(model_patch)
    if arm == "c2f_off":
        data["inference"]["c2f"] = False
        data["train"]["fine_frame_mode"] = "expanded"
    elif arm == "al_off":
        data["train"]["use_orfa"] = False
    elif arm == "single_depth":
        data["train"]["estimator_profiles"] = ["balanced"]
    return validate_run_config(data)
