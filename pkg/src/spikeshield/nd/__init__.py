"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .conv import avg_pool2d, conv2d, transposed_conv2d
from .ops import (
    abs, add, broadcast_to, clamp, concat, cross_entropy, div, exp, getitem, linear, log,
    log_softmax, matmul, max, mean, mul, neg, reshape, sign, softplus, sqrt, square, sub, sum,
    tensor,
)
from .serialize import dumps, loads, read_tensor, write_tensor
from .tensor import Node, Tensor, backward, is_grad_enabled, no_grad, topological_order

__all__ = [
    "Tensor", "Node", "backward", "no_grad", "is_grad_enabled", "topological_order", "tensor",
    "add", "sub", "mul", "div", "neg", "abs", "square", "sqrt", "log", "exp", "sign", "clamp",
    "softplus", "sum", "mean", "max", "reshape", "getitem", "concat", "broadcast_to", "matmul",
    "linear", "log_softmax", "cross_entropy", "conv2d", "transposed_conv2d", "avg_pool2d",
    "write_tensor", "read_tensor", "dumps", "loads",
]
