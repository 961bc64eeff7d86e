"""
Environment-backed settings and logging setup.

Settings come from the process environment, optionally seeded from a .env file.
Every getter reads os.getenv at call time so tests can patch the environment.
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

DEFAULT_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _env_bool(name, default):
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def log_level():
    return os.getenv("ATTENTIVO_LOG_LEVEL", "INFO").upper()


def default_seed():
    return int(os.getenv("ATTENTIVO_SEED", "0"))


def default_window_size():
    return int(os.getenv("ATTENTIVO_WINDOW_SIZE", "4"))


def default_mask_rho():
    return float(os.getenv("ATTENTIVO_MASK_RHO", "0.51"))


def default_pixel_threshold():
    return float(os.getenv("ATTENTIVO_RANSAC_PIXEL_THRESHOLD", "1.0"))


def progress_enabled():
    """Whether tqdm progress bars are shown."""
    return _env_bool("ATTENTIVO_PROGRESS", True)


def configure_logging(level=None):
    """Install a single stream handler on the root logger. Called once by the CLI."""
    level = (level or log_level()).upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(os.getenv("ATTENTIVO_LOG_FORMAT", DEFAULT_LOG_FORMAT)))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.INFO))
    return root
