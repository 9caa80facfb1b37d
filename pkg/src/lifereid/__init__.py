"""Lifelong backward-compatible representation learning for identity retrieval.

A self-contained numpy implementation: a reverse-mode autodiff engine, a
synthetic domain-shifted identity benchmark, a small attention-augmented
convolutional embedding model, compatibility-aware training objectives, a
sequential trainer with replay, an append-only gallery feature store, and
the retrieval evaluation protocol that never recomputes old gallery
features.
"""

from .autodiff import Tensor, backward, conv2d, gem_pool, grad_check, l2_normalize
from .errors import LifereidError
from .losses import LossWeights
from .synth import GenConfig, gen_benchmark
from .trainer import AblationFlags, TrainConfig, train_joint, train_sequence

__all__ = [
    "AblationFlags",
    "GenConfig",
    "LifereidError",
    "LossWeights",
    "Tensor",
    "TrainConfig",
    "backward",
    "conv2d",
    "gem_pool",
    "gen_benchmark",
    "grad_check",
    "l2_normalize",
    "train_joint",
    "train_sequence",
]

__version__ = "0.1.0"
