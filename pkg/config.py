"""
Configuration for the scenefix in-place scene completion project.

Loads settings from .env file if present, otherwise uses defaults.
Experiment parameters (forge sizes, model widths, training steps, ...) live
in the JSON run config validated by scenefix/run_config.py; this module only
holds locations and process-wide defaults.
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env from project root
PROJECT_ROOT = Path(__file__).parent
load_dotenv(PROJECT_ROOT / ".env")

# ──────────────────────────────────────────────
# Paths
# ──────────────────────────────────────────────
DATASET_ROOT = os.getenv("DATASET_ROOT", str(PROJECT_ROOT / "data" / "scenes"))
RUNS_DIR = os.getenv("RUNS_DIR", str(PROJECT_ROOT / "runs"))
LOGS_DIR = os.getenv("LOGS_DIR", str(PROJECT_ROOT / "logs"))
REPORTS_DIR = os.getenv("REPORTS_DIR", str(PROJECT_ROOT / "reports"))
PIPELINE_STATUS_FILE = os.getenv(
    "PIPELINE_STATUS_FILE", str(PROJECT_ROOT / "data" / "pipeline_status.json")
)

# Ensure directories exist
for d in (LOGS_DIR, REPORTS_DIR):
    Path(d).mkdir(parents=True, exist_ok=True)

# ──────────────────────────────────────────────
# Process-wide defaults
# ──────────────────────────────────────────────
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "1"))
WORKERS = int(os.getenv("WORKERS", "1"))              # Per-scene worker pool size
DETERMINISTIC_MODE = os.getenv("DETERMINISTIC_MODE", "1") == "1"

# Train/val/test split by seed modulus
SPLIT_MODULUS = 10
SPLIT_BUCKETS = {
    "train": tuple(range(0, 8)),
    "val": (8,),
    "test": (9,),
}
