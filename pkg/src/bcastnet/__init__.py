"""Broadcast (bottom-up, densely concatenated inception) networks for music genre classification."""

from .arch import ArchSpec, Model, VariantId, build_arch, conv_census, param_count, shape_trace
from .audio import DspConfig, MelSpectrogram, preprocess_clip
from .tensor import Tensor, backward, grad_check, precision

__all__ = [
    "ArchSpec", "Model", "VariantId", "build_arch", "conv_census", "param_count", "shape_trace",
    "DspConfig", "MelSpectrogram", "preprocess_clip", "Tensor", "backward", "grad_check",
    "precision",
]
