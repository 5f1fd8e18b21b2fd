# src/utils.py

import functools
import json
import os
import random
import sys
import tempfile
import time

import pandas as pd
from loguru import logger

from src.config import LOG_LEVEL, METRICS_COLUMNS


# === Logging setup ===
def setup_logging(log_dir=None, level=LOG_LEVEL):
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <7} | {message}")
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        logger.add(os.path.join(log_dir, "hdnn.log"), level="DEBUG", rotation="10 MB",
                   format="{time:YYYY-MM-DD HH:mm:ss} | {level} | {name}:{line} | {message}")


# === Retry Decorator for flaky file systems ===
def retry(max_attempts=3, delay=0.5, backoff=2, jitter=True, exceptions=(OSError,)):
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            attempts = 0
            current_delay = delay
            while True:
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    attempts += 1
                    logger.warning(f"⚠️ Attempt {attempts} of {func.__name__} failed: {e}")
                    if attempts == max_attempts:
                        raise
                    time.sleep(current_delay + (random.uniform(0, 0.1) if jitter else 0))
                    current_delay *= backoff
        return wrapper
    return decorator


# === Metrics CSV ===
def init_metrics_log(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        with open(path, "w") as f:
            f.write(",".join(METRICS_COLUMNS) + "\n")


def log_epoch_metrics(history, path):
    """Append per-epoch rows (a DataFrame or list of dicts) to the metrics CSV."""
    init_metrics_log(path)
    rows = pd.DataFrame(history).reindex(columns=METRICS_COLUMNS)
    rows.to_csv(path, mode="a", header=False, index=False)
    logger.info(f"📊 {len(rows)} epoch rows appended to {path}")


# === Atomic JSON writes (run manifests) ===
@retry()
def write_json_atomic(payload, path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=parent, prefix=".tmp_", suffix=".json")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path
