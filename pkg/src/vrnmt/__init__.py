"""Variational recurrent NMT with a from-scratch numpy autodiff core."""

from .config import ModelDims, TrainConfig
from .models import ModelParams

__all__ = ["ModelDims", "ModelParams", "TrainConfig"]
__version__ = "0.1.0"
