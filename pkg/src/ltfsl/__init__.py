"""Long-tailed and few-shot classification toolkit on feature vectors."""
from ltfsl.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
