"""GroupBERT encoders, cost accounting and attention-locality analysis on a small numpy autograd engine."""
from .tensor import Tensor, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "precision", "__version__"]
