"""3-D residual network with channel and spatio-temporal attention, built on numpy.

Tensor kernels, a reverse-mode tape, the attention blocks, clip
preprocessing, training, Grad-CAM saliency and a batch CLI.
"""

from .autodiff import Tape, backward, finite_diff_check
from .model import build_model, count_params, forward, shape_table
from .tensor import ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "backward",
    "build_model",
    "count_params",
    "finite_diff_check",
    "forward",
    "shape_table",
]
