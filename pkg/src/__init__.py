"""
COBRA task implementation.

Files:
    - config.py     : ArchConfig, windows, PipelineConfig
    - model.py      : graph builder, parameter / FLOP accounting
    - preprocess.py : windowing, resampling, body mask, target labels
    - postprocess.py: argmax, nearest upsampling, label remap
    - training.py   : soft Dice loss, gradient, augmentations
    - pipeline.py   : end-to-end inference
    - cli.py        : command line
"""

from .config import ArchConfig, PipelineConfig, WindowSpec, load_arch_config
from .model import build_cobra, build_model, count_flops, count_params

__all__ = [
    "ArchConfig",
    "PipelineConfig",
    "WindowSpec",
    "build_cobra",
    "build_model",
    "count_flops",
    "count_params",
    "load_arch_config",
]
