from .core import Tensor, backward
from .ops import (
    add,
    as_tensor,
    batch_norm,
    concat_channels,
    conv2d,
    l1_loss,
    leaky_relu,
    nn_upsample2x,
    relu,
    scale,
    sum_all,
)
from .optim import SGD, Adam, Optimizer

__all__ = [
    "Tensor",
    "backward",
    "add",
    "as_tensor",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "l1_loss",
    "leaky_relu",
    "nn_upsample2x",
    "relu",
    "scale",
    "sum_all",
    "Adam",
    "SGD",
    "Optimizer",
]
