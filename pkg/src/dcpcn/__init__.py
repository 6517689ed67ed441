"""Dual-codebook point cloud completion on a small numpy autodiff engine."""
from __future__ import annotations

from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ABLATIONS, DCPCN, ModelConfig, ablation_config, forward_full, total_loss

__all__ = [
    "ABLATIONS",
    "ConfigError",
    "DCPCN",
    "DataError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "ablation_config",
    "forward_full",
    "total_loss",
]
__version__ = "0.1.0"
