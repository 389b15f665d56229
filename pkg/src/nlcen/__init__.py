"""Non-local context encoding for robust segmentation, on a small numpy autograd engine."""
from .autograd import Tensor, backward, grad, no_grad
from .nlce import NLCE, nlce_forward
from .segnet import NLCEN, BackboneConfig, ModelConfig

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad", "no_grad", "NLCE", "nlce_forward", "NLCEN", "BackboneConfig", "ModelConfig"]
