# src/config.py

import os
from dotenv import dotenv_values, load_dotenv

from src.errors import ConfigurationError

load_dotenv()


def _env_flag(name):
    return os.getenv(name, "").strip().lower() in {"1", "true", "yes", "on"}


# ==== Paths and run settings from .env ====
DEFAULT_SEED = int(os.getenv("HDNN_SEED", "0"))
LOG_DIR = os.getenv("HDNN_LOG_DIR", "logs")
MODEL_DIR = os.getenv("HDNN_MODEL_DIR", "models")
LOG_LEVEL = os.getenv("HDNN_LOG_LEVEL", "INFO").upper()
MLFLOW_ENABLED = _env_flag("HDNN_MLFLOW")
MLFLOW_EXPERIMENT = "HighwayDNN"

METRICS_COLUMNS = ["epoch", "objective", "loss", "fer", "expected_accuracy"]

# ==== Optimizer settings ====
LEARNING_RATE = 0.1            # per sample, applied to minibatch-mean gradients
MOMENTUM_SCHEDULE = (0.0, 0.9)  # (epoch 1, later epochs)
BATCH_SIZE = 32
EPOCHS = 10
INIT_RANGE = 0.5               # weights ~ U[-0.5, 0.5], biases 0

# ==== Objective settings ====
TEMPERATURE = 1.0
ACOUSTIC_SCALE = 1.0
SMBR_SMOOTHING = 0.2           # p
HYBRID_WEIGHT = 0.0            # q
SMBR_EPOCHS = 4
SMBR_LEARNING_RATE = 0.01      # per utterance; the sMBR risk is summed over frames

# ==== Adaptation settings ====
ADAPT_LEARNING_RATE = 2e-4
ADAPT_EPOCHS = 5
ADAPT_BATCH_SIZE = 1

# ==== Numerics ====
LOG_FLOOR = 1e-300
MAX_ENUMERATED_PATHS = 10_000
GRADCHECK_STEP = 1e-5
GRADCHECK_RTOL = 1e-6
GRADCHECK_SMBR_RTOL = 1e-5
GRADCHECK_ATOL = 1e-8


def read_config_file(path):
    """Parse a `key = value` file (dotenv syntax) into a dict of strings."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigurationError(f"{path}: expected 'key = value', got {key!r}")
        values[key.replace("-", "_")] = value
    return values
