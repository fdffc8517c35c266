"""Layers as free functions: Tensor in, Tensor out, variables via get_variable.

Calling a layer twice with distinct scopes creates disjoint parameters; the
same scope with reuse shares them.
"""
from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np

from . import ops
from .graph import Tensor, get_default_graph

Activation = Union[None, str, Callable]

_ACTIVATIONS = {
    "relu": ops.relu,
    "sigmoid": ops.sigmoid,
    "tanh": ops.tanh,
}


def _apply_activation(x: Tensor, activation: Activation) -> Tensor:
    if activation is None:
        return x
    if callable(activation):
        return activation(x)
    fn = _ACTIVATIONS.get(activation)
    if fn is None:
        raise ValueError(
            f"unknown activation {activation!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def dense(x: Tensor, units: int, activation: Activation = None,
          scope: str = "dense", use_bias: bool = True,
          kernel_initializer: Optional[Callable] = None) -> Tensor:
    """Fully connected layer: activation(x @ kernel + bias)."""
    if len(x.shape) != 2:
        raise ValueError(f"dense: input must be rank 2, got {ops.format_shape(x.shape)}")
    if x.shape[1] is None:
        raise ValueError("dense: input width must be statically known")
    if units < 1:
        raise ValueError(f"dense: units must be >= 1, got {units}")
    graph = get_default_graph()
    with graph.variable_scope(scope):
        kernel = graph.get_variable("kernel", (x.shape[1], units),
                                    initializer=kernel_initializer)
        out = ops.matmul(x, kernel)
        if use_bias:
            bias = graph.get_variable("bias", (units,))
            out = ops.add(out, bias.read())
    return _apply_activation(out, activation)


def conv2d(x: Tensor, filters: int, kernel_size, activation: Activation = None,
           scope: str = "conv2d", use_bias: bool = True) -> Tensor:
    """Valid-padding stride-1 convolution over NHWC input."""
    if len(x.shape) != 4:
        raise ValueError(f"conv2d: input must be rank-4 NHWC, got {ops.format_shape(x.shape)}")
    if x.shape[3] is None:
        raise ValueError("conv2d: input channel count must be statically known")
    if filters < 1:
        raise ValueError(f"conv2d: filters must be >= 1, got {filters}")
    if isinstance(kernel_size, int):
        kernel_size = (kernel_size, kernel_size)
    kh, kw = int(kernel_size[0]), int(kernel_size[1])
    graph = get_default_graph()
    with graph.variable_scope(scope):
        kernel = graph.get_variable("kernel", (kh, kw, x.shape[3], filters))
        out = ops.conv2d(x, kernel.read())
        if use_bias:
            bias = graph.get_variable("bias", (filters,))
            out = ops.add(out, bias.read())
    return _apply_activation(out, activation)


def max_pooling2d(x: Tensor, pool_size, strides) -> Tensor:
    """Max pooling over NHWC input (valid padding)."""
    return ops.max_pool2d(x, pool_size, strides)


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch dims: [b, d1, ..., dk] -> [b, d1*...*dk]."""
    if len(x.shape) < 2:
        raise ValueError(f"flatten: input must have rank >= 2, got {ops.format_shape(x.shape)}")
    rest = x.shape[1:]
    if any(d is None for d in rest):
        raise ValueError(
            f"flatten: non-batch dims must be statically known, got {ops.format_shape(x.shape)}")
    width = int(np.prod(rest)) if rest else 1
    return ops.reshape(x, (-1, width))


def dropout(x: Tensor, rate: float, training: bool) -> Tensor:
    """Inverted dropout during training; identity otherwise."""
    return ops.dropout(x, rate, training)
