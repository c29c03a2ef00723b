from . import ops
from .optim import SGD, sgd_step
from .tensor import Parameter, Tensor, backward, default_dtype, get_default_dtype, set_default_dtype

__all__ = [
    "ops", "SGD", "sgd_step", "Parameter", "Tensor", "backward",
    "default_dtype", "get_default_dtype", "set_default_dtype",
]
