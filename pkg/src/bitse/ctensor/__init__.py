from .tensor import (ComplexTensor, Tape, TensorError, active_tape, backward,
                     parameter, record, set_tape, tensor, unbroadcast,
                     zero_grad)
from .ops import (add, attention, cabs, cat, cimag, cmean, conj, conv2d,
                  conv_transpose2d, creal, crelu, csum, div,
                  global_layer_norm, linear, log10_r, matmul, mul, neg,
                  pad2d, reshape, sqrt_r, sub, take, transpose2d,
                  LAYERNORM_EPS)

__all__ = [
    "ComplexTensor", "Tape", "TensorError", "active_tape", "backward",
    "parameter", "record", "set_tape", "tensor", "unbroadcast", "zero_grad",
    "add", "attention", "cabs", "cat", "cimag", "cmean", "conj", "conv2d",
    "conv_transpose2d", "creal", "crelu", "csum", "div", "global_layer_norm",
    "linear", "log10_r", "matmul", "mul", "neg", "pad2d", "reshape", "sqrt_r",
    "sub", "take", "transpose2d", "LAYERNORM_EPS",
]
