"""Dilated convolutional networks for small-object segmentation, built on a small numpy autodiff core."""

from .model import Model, forward, init_model
from .netspec import NetworkSpec, parse_layer, preset, preset_names

__version__ = "0.1.0"

__all__ = ["Model", "NetworkSpec", "forward", "init_model", "parse_layer", "preset", "preset_names"]
