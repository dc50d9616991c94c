"""
Exception hierarchy shared by every scenefix module.

Rejected placements are values (see scene_forge.Rejected), not exceptions.
"""


class ScenefixError(Exception):
    """Base class for all project errors."""


class ContractViolation(ScenefixError, ValueError):
    """A caller broke an operation's precondition (shape, range, ...)."""


class EmptyGeometry(ScenefixError):
    """An operation needed at least one point / voxel and got none."""


class EmptyScene(ScenefixError):
    """A scene-level operation found no usable instance."""


class ForgeFailure(ScenefixError):
    """Fewer instances than the minimum could be placed for a seed."""

    def __init__(self, seed: int, placed: int, required: int):
        super().__init__(
            f"seed {seed}: only {placed} instance(s) placed, {required} required"
        )
        self.seed = seed
        self.placed = placed
        self.required = required


class DatasetLoadError(ScenefixError):
    """A persisted scene could not be read back."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ConfigError(ScenefixError):
    """Run configuration failed schema validation."""


class CheckpointError(ScenefixError):
    """Base class for checkpoint container problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated file or malformed header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint schema version is not supported."""


class CheckpointChecksumError(CheckpointError):
    """SHA-256 trailer does not match the file content."""


class StageMismatch(CheckpointError):
    """Checkpoint was trained for a different stage or model kind."""


class TrainingDivergence(ScenefixError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, l_fm: float, l_al: float | None, grad_norm: float | None):
        super().__init__(
            f"non-finite loss at step {step}: l_fm={l_fm}, l_al={l_al}, "
            f"last grad_norm={grad_norm}"
        )
        self.step = step
        self.l_fm = l_fm
        self.l_al = l_al
        self.grad_norm = grad_norm
