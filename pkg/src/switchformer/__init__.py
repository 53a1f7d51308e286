"""Multimodal transformer encoder with learnable per-layer attention-mode
switching and cross-layer input switching, plus its pretraining
objectives, synthetic paired corpus, and training CLI."""

from .attention import InteractionMode, build_mode_mask, generalized_mha
from .encoder import EncoderConfig, EncoderParams, MultimodalBatch, count_flops, encoder_forward
from .tensor import ParamStore, Tensor, backward, finite_diff_grad
from .training import TrainConfig, evaluate, extract_architecture, temperature_schedule, train

__all__ = [
    "EncoderConfig", "EncoderParams", "InteractionMode", "MultimodalBatch",
    "ParamStore", "Tensor", "TrainConfig", "backward", "build_mode_mask",
    "count_flops", "encoder_forward", "evaluate", "extract_architecture",
    "finite_diff_grad", "generalized_mha", "temperature_schedule", "train",
]
