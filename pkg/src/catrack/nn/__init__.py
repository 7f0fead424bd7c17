from .ops import (
    ConvSpec,
    add,
    concat,
    conv2d,
    dropout,
    flatten,
    global_avg_pool,
    instance_embedding_loss,
    linear,
    lrn,
    maxpool2d,
    mul,
    relu,
    reshape,
    roialign,
    sigmoid,
    softmax_ce_loss,
    take,
)
from .optim import SGD, SgdConfig, sgd_step
from .tensor import NumericError, ShapeError, Tensor, no_grad

__all__ = [
    "ConvSpec", "NumericError", "SGD", "SgdConfig", "ShapeError", "Tensor",
    "add", "concat", "conv2d", "dropout", "flatten", "global_avg_pool",
    "instance_embedding_loss", "linear", "lrn", "maxpool2d", "mul", "no_grad",
    "relu", "reshape", "roialign", "sgd_step", "sigmoid", "softmax_ce_loss", "take",
]
