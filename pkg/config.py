"""Runtime configuration and default parameters for the cribra toolkit."""

import logging
import os

from dotenv import load_dotenv

load_dotenv()  # Load CRIBRA_* overrides from a local .env file

# Segmentation defaults, expressed at the 1024x1024 native field of view
REFERENCE_SIDE = 1024
MIN_NUCLEUS_AREA = 40.0
MAX_NUCLEUS_AREA = 5000.0

# Feature extraction runs on tiles downscaled to this side (0 = native)
FEATURE_SCALE = 256

# Augmentation grid and blank-region rejection
GRID_DELTA = 50
GRID_K_MAX = 2
GRID_THETAS = (0.0, 60.0, 120.0)
GRID_SIDE = 1024
MAX_BLANK_FRACTION = 0.90
BLANK_LUMINANCE = 240

# Classifier defaults
SVM_C = 100.0
SVM_GAMMA = 0.1
SVM_TOL = 1e-3
SVM_MAX_PASSES = 50
SVM_TUNE_GRID = {
    "C": (1.0, 10.0, 100.0, 1000.0),
    "gamma": (0.001, 0.01, 0.1, 1.0),
}

MLP_HIDDEN = (512, 128)
MLP_EPOCHS = 10000
MLP_LR = 1e-3
MLP_MOMENTUM = 0.9
MLP_BATCH = 32

# Cross-validation sampling
N_PER_CLASS = 1500

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def get_thread_count() -> int:
    """Worker cap from CRIBRA_THREADS, falling back to the CPU count."""
    raw = os.getenv("CRIBRA_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logging.getLogger(__name__).warning(
                "Ignoring non-integer CRIBRA_THREADS=%r", raw
            )
    return max(1, os.cpu_count() or 1)


def get_default_seed() -> int:
    raw = os.getenv("CRIBRA_SEED", "0").strip()
    try:
        return int(raw)
    except ValueError:
        return 0


def setup_logging(level: str = "") -> None:
    """Install the single stream handler used by every command."""
    level = (level or os.getenv("CRIBRA_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))
