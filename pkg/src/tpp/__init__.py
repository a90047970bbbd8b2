"""Desk-scale parameter-efficient fine-tuning with target-parameter pre-training.

The package implements the full three-stage protocol on CPU-friendly
models: optional self-supervised backbone pre-training, a pre-training
stage for the new parameters a PEFT mechanism introduces (backbone
frozen, pretext objective on the target training split), and supervised
fine-tuning. Everything runs on a small deterministic reverse-mode
autodiff engine over float64 numpy arrays, so freezing, initialization
and scheduling decisions are exact and auditable.
"""

from . import (checkpoint, config, data, metrics, optim, peft, pipeline,
               pretext, registry, rng, tensor, vit)
from .registry import ParamGroup, ParamRegistry
from .rng import SeededRng
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ParamGroup", "ParamRegistry", "SeededRng", "Tensor", "backward", "no_grad",
    "checkpoint", "config", "data", "metrics", "optim", "peft", "pipeline",
    "pretext", "registry", "rng", "tensor", "vit", "__version__",
]
