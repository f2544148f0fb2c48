from .core import (
    Parameter,
    Tape,
    Tensor,
    activation,
    add,
    backward,
    conv2d,
    dense,
    flatten,
    get_tape,
    global_avg_pool,
    log,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    square,
    sub,
    sum,
    tanh,
)
from .fileio import decode_tensor, encode_tensor, load_tensor, save_tensor
from .optim import Optimizer, OptimizerConfig, optimizer_step
from .pca import PcaModel, pca_fit, pca_fit_project

__all__ = [
    "Parameter",
    "PcaModel",
    "Optimizer",
    "OptimizerConfig",
    "Tape",
    "Tensor",
    "activation",
    "add",
    "backward",
    "conv2d",
    "decode_tensor",
    "dense",
    "encode_tensor",
    "flatten",
    "get_tape",
    "global_avg_pool",
    "load_tensor",
    "log",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "optimizer_step",
    "pca_fit",
    "pca_fit_project",
    "relu",
    "reshape",
    "save_tensor",
    "softmax",
    "square",
    "sub",
    "sum",
    "tanh",
]
