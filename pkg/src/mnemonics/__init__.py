"""Mnemonics-style exemplar optimization for class-incremental learning."""

import torch

from .errors import MnemonicsError

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"

__all__ = ["MnemonicsError", "__version__"]
