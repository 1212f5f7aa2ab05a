"""3D matrix-capsule network with EM routing and capsule-pooling.

Joint action classification and pixel-wise localization over short video
clips, trained end-to-end on a procedurally generated motion dataset.
"""

from .errors import (
    CapsNetError,
    CheckpointError,
    ConfigurationError,
    GenerationError,
    NumericError,
    UsageError,
)
from .tensor import GradientTape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "CapsNetError",
    "CheckpointError",
    "ConfigurationError",
    "GenerationError",
    "GradientTape",
    "NumericError",
    "Tensor",
    "UsageError",
    "backward",
    "grad_check",
    "__version__",
]
