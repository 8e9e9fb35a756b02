"""Windowed cross-view matching attention and a coarse-to-fine decoder in numpy."""
from .autograd import Tape, Var, get_dtype, precision, set_precision

__version__ = "0.1.0"

__all__ = ["Tape", "Var", "get_dtype", "precision", "set_precision", "__version__"]
