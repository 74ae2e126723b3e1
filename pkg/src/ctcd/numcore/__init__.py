from ctcd.numcore.autodiff import (
    DenseArray,
    Op,
    Tape,
    add,
    backward,
    concat,
    conv1d,
    log_softmax,
    log_softmax_np,
    logsumexp,
    logsumexp_np,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    softmax_np,
    sum_,
    tanh,
)
from ctcd.numcore.rng import Rng

__all__ = [
    "DenseArray", "Op", "Rng", "Tape", "add", "backward", "concat", "conv1d",
    "log_softmax", "log_softmax_np", "logsumexp", "logsumexp_np", "matmul", "mean",
    "mul", "relu", "reshape", "scale", "sigmoid", "slice_", "softmax", "softmax_np",
    "sum_", "tanh",
]
