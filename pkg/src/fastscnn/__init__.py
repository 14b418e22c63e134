"""Real-time semantic segmentation in NumPy with a small reverse-mode autodiff core."""
from .model import FastSCNN, ModelConfig, build, count_flops, count_params, shape_trace, summary_report
from .tensor import Tape, Tensor, backward

__all__ = [
    "FastSCNN", "ModelConfig", "Tape", "Tensor", "backward", "build", "count_flops",
    "count_params", "shape_trace", "summary_report",
]
__version__ = "0.1.0"
