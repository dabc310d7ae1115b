from . import layers, ops, store, tensorio
from .store import ParameterStore, adam_step
from .tensor import Tensor, as_tensor, no_grad, set_finite_checks

__all__ = [
    "layers", "ops", "store", "tensorio",
    "ParameterStore", "adam_step",
    "Tensor", "as_tensor", "no_grad", "set_finite_checks",
]
