"""Triplet relation self-distillation for image classifiers."""

from .config import OptimConfig, TorsdConfig, best_setting_config, load_config
from .errors import TorsdError

__version__ = "0.1.0"

__all__ = ["OptimConfig", "TorsdConfig", "TorsdError", "best_setting_config", "load_config", "__version__"]
