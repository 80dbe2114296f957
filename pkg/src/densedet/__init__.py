"""densedet: semi-supervised anchor-free shape detection, dense pseudo-labels.

A small self-contained stack: a numpy autodiff engine with numba-accelerated
convolution kernels, an anchor-free pyramid detector, and a teacher-student
training loop that filters dense pseudo-labels with adaptive per-category
thresholds, proxy-embedding gates, an EMA-aggregated teacher, patch-shuffle
augmentation, and a cross-scale consistency loss.
"""

from .kernels import BACKEND
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "BACKEND", "__version__"]
