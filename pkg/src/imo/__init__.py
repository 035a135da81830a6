"""Sparse invariant-feature masking over a small transformer encoder.

The package trains binary feature masks with a surrogate-gradient step
function, pools tokens with mask-derived attention, and evaluates the
result under synthetic domain shift.
"""

__version__ = "0.1.0"

from .errors import ConfigError, InputError, RunFailure, ShapeError, TapeError
from .tensor import Tape, Tensor

__all__ = [
    "ConfigError",
    "InputError",
    "RunFailure",
    "ShapeError",
    "TapeError",
    "Tape",
    "Tensor",
    "__version__",
]
