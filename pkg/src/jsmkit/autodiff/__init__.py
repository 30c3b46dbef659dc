from .tensor import Tape, Tensor, grad, no_grad
from . import nn

__all__ = ["Tape", "Tensor", "grad", "no_grad", "nn"]
