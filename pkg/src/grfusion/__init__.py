"""Multifocus image fusion guided by hard-pixel detection and full-focus generation."""

from .core import SourceStack, load_image, load_stack, save_image
from .errors import (
    ArityError,
    ConfigError,
    ConsistencyError,
    DependencyError,
    DomainError,
    GRFusionError,
    ImageReadError,
    MetricError,
    ParamError,
    StackShapeError,
    UntrainedModelError,
)
from .ffig import FfigConfig, FfigNetwork, generate_full_focus
from .hpd import HpdConfig, HpdNetwork, detect_focus, detect_hard_pixels
from .metrics import evaluate
from .pipeline import FusionResult, fuse, load_models
from .recombine import DecisionMaps, compose, compose_ablation, update_decision_maps

__version__ = "0.1.0"

__all__ = [
    "ArityError",
    "ConfigError",
    "ConsistencyError",
    "DecisionMaps",
    "DependencyError",
    "DomainError",
    "FfigConfig",
    "FfigNetwork",
    "FusionResult",
    "GRFusionError",
    "HpdConfig",
    "HpdNetwork",
    "ImageReadError",
    "MetricError",
    "ParamError",
    "SourceStack",
    "StackShapeError",
    "UntrainedModelError",
    "compose",
    "compose_ablation",
    "detect_focus",
    "detect_hard_pixels",
    "evaluate",
    "fuse",
    "generate_full_focus",
    "load_image",
    "load_models",
    "load_stack",
    "save_image",
    "update_decision_maps",
]
