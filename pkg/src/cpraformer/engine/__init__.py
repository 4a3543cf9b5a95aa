"""Minimal differentiable tensor engine: 4D tensors, ops, FFT, reverse-mode tape."""

from .fft import ComplexPair, fft2d, ifft2d, ifft2d_with_residue
from .ops import (abs_, add, concat, conv2d, depthwise_conv2d, gap, gelu,
                  layernorm, linear, masked_softmax, matmul, mean_all, mean_over,
                  merge_heads, mul, narrow, neg, pixel_shuffle,
                  pixel_unshuffle, relu, reshape4, scale, sigmoid, softmax,
                  split_channels, split_half, split_heads, sub, sum_all,
                  transpose_last2)
from .tensor import (PRECISION_DTYPES, PrecisionError, ShapeError, Tape,
                     Tensor, backward, debug_checks_enabled, scalar,
                     set_debug_checks, tensor)

__all__ = [
    "ComplexPair", "fft2d", "ifft2d", "ifft2d_with_residue",
    "abs_", "add", "concat", "conv2d", "depthwise_conv2d", "gap", "gelu",
    "layernorm", "linear", "masked_softmax", "matmul", "mean_all", "mean_over",
    "merge_heads", "mul", "narrow", "neg", "pixel_shuffle", "pixel_unshuffle",
    "relu", "reshape4", "scale", "sigmoid", "softmax", "split_channels",
    "split_half", "split_heads", "sub", "sum_all", "transpose_last2",
    "PRECISION_DTYPES", "PrecisionError", "ShapeError", "Tape", "Tensor",
    "backward", "debug_checks_enabled", "scalar", "set_debug_checks", "tensor",
]
