"""Extractive question-answering reader with SRU encoders and fully-aware attention, built on a small numpy autodiff core."""

from .model import ModelConfig, Reader, load_checkpoint, save_checkpoint, span_search
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "Reader",
    "Tensor",
    "backward",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "span_search",
]
