from .ops import (add, add_bias, concat, gather_max, gather_rows, matmul, max_over_axis,
                  mean_over_axis, mse, relu, reshape, scale, softmax_cross_entropy, sub, sum_all, unsqueeze)
from .optim import OptimState, load_params, lr_at_epoch, save_params, sgd_step
from .tensor import (NonFiniteError, ShapeError, Tensor, backward, constant, parameter,
                     set_debug, topological_order)

__all__ = [
    "Tensor", "parameter", "constant", "backward", "topological_order", "set_debug",
    "ShapeError", "NonFiniteError",
    "add", "sub", "scale", "matmul", "add_bias", "relu", "concat", "reshape", "unsqueeze",
    "gather_rows", "gather_max", "max_over_axis", "mean_over_axis", "sum_all", "softmax_cross_entropy", "mse",
    "OptimState", "sgd_step", "lr_at_epoch", "save_params", "load_params",
]
