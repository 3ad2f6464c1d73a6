"""
Doubly Stochastic Kernel Machines - Configuration
==================================================

Central configuration for training, prediction, GP estimation and the
benchmark harness. Defaults live here; environment variables (or a .env
file next to the project) override the few that vary per machine.
"""

import logging
import os
from pathlib import Path
from typing import List

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# ============================================================================
# PROJECT PATHS
# ============================================================================

BASE_DIR = Path(__file__).parent.parent
DATA_DIR = BASE_DIR / "data"
OUTPUTS_DIR = Path(os.getenv("DSGD_OUTPUTS_DIR", BASE_DIR / "outputs"))

# Subdirectories
MODELS_DIR = OUTPUTS_DIR / "models"
SERIES_DIR = OUTPUTS_DIR / "series"
SYNTH_DIR = DATA_DIR / "synthetic"

# ============================================================================
# PARALLELISM
# ============================================================================


def get_thread_cap() -> int:
    """Thread cap from DSGD_THREADS, falling back to the CPU count."""
    raw = os.getenv("DSGD_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            return 1
    return os.cpu_count() or 1


THREADS = get_thread_cap()

# ============================================================================
# TRAINING DEFAULTS
# ============================================================================

DEFAULT_THETA = 1.0
DEFAULT_NU = 1e-6
DEFAULT_BATCH_SIZE = 2 ** 8
DEFAULT_BLOCK_SIZE = 2 ** 8
DEFAULT_ITERATIONS = 2 ** 8
DEFAULT_SEED = 0

# Bandwidth from the median trick
DEFAULT_MEDIAN_MULTIPLIER = 0.1
MEDIAN_PAIR_BUDGET = 2 ** 14

# ============================================================================
# NUMERICAL GUARDS
# ============================================================================

DENSITY_RATIO_EXP_CAP = 30.0
SCALE_FOLD_THRESHOLD = 1e-12
MAX_DENSE_GP = 2 ** 14
MAX_OPERATOR_ITERATIONS = 4096
MAX_INPUT_DIM = 10 ** 5
PREDICT_CHUNK_BLOCKS = 64
INITIAL_BLOCK_CAPACITY = 1024

# ============================================================================
# FEATURE AUDITS
# ============================================================================

AUDIT_MAX_FEATURES = 10 ** 5
AUDIT_GRID_POINTS = 12
AUDIT_REPLICATES = 4
# Monte Carlo errors at or below this are exact up to rounding
AUDIT_EXACT_ERROR = 1e-10

# ============================================================================
# MODEL FILE FORMAT
# ============================================================================

MODEL_MAGIC = b"DSGDMODL"
MODEL_FORMAT_VERSION = 1
MODEL_ENDIAN_TAG = b"LE"

# ============================================================================
# LOGGING CONFIGURATION
# ============================================================================

LOG_LEVEL = os.getenv("DSGD_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE = os.getenv("DSGD_LOG_FILE")

_logging_ready = False


def setup_logging(level: str = None) -> None:
    """Install the package log format once; later calls only adjust the level."""
    global _logging_ready
    root = logging.getLogger("dsgd")
    root.setLevel(level or LOG_LEVEL)
    if _logging_ready:
        return
    handler = logging.FileHandler(LOG_FILE) if LOG_FILE else logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    _logging_ready = True


# ============================================================================
# VALIDATION
# ============================================================================

def validate_config() -> List[str]:
    """
    Validate configuration.
    Returns list of warnings/errors.
    """
    issues = []

    raw_threads = os.getenv("DSGD_THREADS")
    if raw_threads and not raw_threads.strip().isdigit():
        issues.append(f"⚠️ DSGD_THREADS is not a positive integer: {raw_threads!r}")

    if LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        issues.append(f"⚠️ Unknown DSGD_LOG_LEVEL: {LOG_LEVEL}")

    if OUTPUTS_DIR.exists() and not os.access(OUTPUTS_DIR, os.W_OK):
        issues.append(f"⚠️ Outputs directory not writable: {OUTPUTS_DIR}")

    if DEFAULT_THETA * DEFAULT_NU <= 0:
        issues.append("⚠️ Default theta * nu must be positive")

    return issues


def print_config():
    """Print current configuration for debugging."""
    print("=" * 80)
    print("DSGD CONFIGURATION")
    print("=" * 80)
    print(f"Base Directory: {BASE_DIR}")
    print(f"Outputs Directory: {OUTPUTS_DIR}")
    print(f"Thread Cap: {THREADS}")
    print(f"Log Level: {LOG_LEVEL}")

    print("\nTraining Defaults:")
    print(f"  theta: {DEFAULT_THETA}")
    print(f"  nu: {DEFAULT_NU}")
    print(f"  batch size: {DEFAULT_BATCH_SIZE}")
    print(f"  block size: {DEFAULT_BLOCK_SIZE}")
    print(f"  iterations: {DEFAULT_ITERATIONS}")

    print("\nNumerical Guards:")
    print(f"  density-ratio exp cap: {DENSITY_RATIO_EXP_CAP}")
    print(f"  scale fold threshold: {SCALE_FOLD_THRESHOLD}")
    print(f"  dense GP limit: {MAX_DENSE_GP}")
    print(f"  variance operator cap: {MAX_OPERATOR_ITERATIONS}")

    issues = validate_config()
    if issues:
        print("\n⚠️ Configuration Issues:")
        for issue in issues:
            print(f"  {issue}")
    else:
        print("\n✅ Configuration validated successfully")

    print("=" * 80)


if __name__ == "__main__":
    print_config()
