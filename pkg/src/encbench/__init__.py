"""encbench: portable transformer-encoder inference with a latency harness."""

from .backends import Backend, BackendId, get_backend, synchronize
from .tensor import DType, DTypeError, ShapeError, Tensor, tensor

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendId",
    "DType",
    "DTypeError",
    "ShapeError",
    "Tensor",
    "get_backend",
    "synchronize",
    "tensor",
    "__version__",
]
