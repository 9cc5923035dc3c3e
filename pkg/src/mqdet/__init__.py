"""Desk-scale multi-modal-queried object detection.

A frozen toy language-queried detector augmented with gated class-scalable
perceiver modules that fold per-category vision queries (exemplar features
from a bounded bank) into the text tokens, trained by vision-conditioned
masked-language modulation on a synthetic ambiguity benchmark.
"""

from .config import ModelConfig, PretrainConfig, TrainConfig, VocabEntry
from .detector import MultiModalDetector, MultiModalQuery, build_model

__all__ = [
    "ModelConfig",
    "PretrainConfig",
    "TrainConfig",
    "VocabEntry",
    "MultiModalDetector",
    "MultiModalQuery",
    "build_model",
]

__version__ = "0.1.0"
