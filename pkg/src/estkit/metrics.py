"""Streaming metrics: an update op fed per minibatch, a value op read at the end.

Accumulators are ordinary non-trainable variables, so nothing here needs a
special checkpoint path. The value op reads accumulators only; by
construction the final value equals the metric computed in a single pass over
the concatenation of all the update batches (weighted), regardless of how the
stream was partitioned.
"""
from __future__ import annotations

from dataclasses import dataclass
from numbers import Number
from typing import Optional

from . import ops
from .graph import Tensor, get_default_graph, zeros_initializer


@dataclass(frozen=True)
class MetricPair:
    """update mutates accumulators for one minibatch; value reads them only."""

    update: Tensor
    value: Tensor


def _ones_like(t: Tensor) -> Tensor:
    return ops.add(ops.mul(t, 0.0), 1.0)


def _weights_vector(weights, like: Tensor) -> Tensor:
    """Per-example weights as a [batch] tensor; defaults to all ones."""
    if weights is None:
        return _ones_like(like)
    graph = get_default_graph()
    if isinstance(weights, Number):
        if weights < 0:
            raise ValueError(f"weights must be >= 0, got {weights}")
        return ops.mul(_ones_like(like), float(weights))
    wt = graph.as_tensor(weights)
    if len(wt.shape) != 1:
        raise ValueError(
            f"weights must be per-example with shape (batch,), got "
            f"{ops.format_shape(wt.shape)}")
    return wt


def _streaming_weighted_mean(name: str, per_example: Tensor, weights) -> MetricPair:
    """total += sum(w*x); count += sum(w); value = total/count (error if count 0)."""
    graph = get_default_graph()
    if len(per_example.shape) != 1:
        raise ValueError(
            f"metric {name!r}: per-example values must be rank 1, got "
            f"{ops.format_shape(per_example.shape)}")
    wt = _weights_vector(weights, per_example)
    with graph.variable_scope(graph.unique_name(f"metric_{name}")):
        total = graph.get_variable("total", (), initializer=zeros_initializer(),
                                   trainable=False)
        count = graph.get_variable("count", (), initializer=zeros_initializer(),
                                   trainable=False)
    update = ops.group([
        ops.assign_add(total, ops.reduce_sum(ops.mul(per_example, wt))),
        ops.assign_add(count, ops.reduce_sum(wt)),
    ])
    ratio = ops.div_no_nan(total.read(), count.read())
    value = graph.add_node("metric_value", [ratio, count.read()], {"name": name},
                           shape=())
    return MetricPair(update=update, value=value)


def mean(values, weights=None, name: str = "mean") -> MetricPair:
    """Streaming weighted mean of a per-example value vector."""
    graph = get_default_graph()
    vt = graph.as_tensor(values)
    return _streaming_weighted_mean(name, vt, weights)


def average_loss(per_example_loss, weights=None) -> MetricPair:
    """Streaming weighted mean of per-example losses."""
    return mean(per_example_loss, weights, name="average_loss")


def accuracy(labels, predictions, weights=None, name: str = "accuracy") -> MetricPair:
    """Streaming match rate.

    predictions of rank 2 are class scores (argmax decides, ties to the lowest
    index) against integer labels; rank-1 predictions are compared to labels
    directly.
    """
    graph = get_default_graph()
    pt = graph.as_tensor(predictions)
    if len(pt.shape) == 2:
        lt = graph.as_tensor(labels, dtype="int")
        if lt.dtype != "int":
            lt = ops.cast_int(lt)
        if len(lt.shape) != 1:
            raise ValueError(
                f"accuracy: labels must be (batch,) class ids, got "
                f"{ops.format_shape(lt.shape)}")
        matches = ops.equal(ops.argmax(pt), lt)
    elif len(pt.shape) == 1:
        lt = graph.as_tensor(labels, dtype=pt.dtype)
        if lt.dtype != pt.dtype:
            lt = ops.cast_int(lt) if pt.dtype == "int" else ops.cast_float(lt)
        if len(lt.shape) != 1:
            raise ValueError(
                f"accuracy: labels must be rank 1, got {ops.format_shape(lt.shape)}")
        matches = ops.equal(pt, lt)
    else:
        raise ValueError(
            f"accuracy: predictions must be rank 1 or 2, got {ops.format_shape(pt.shape)}")
    return _streaming_weighted_mean(name, matches, weights)


def mean_squared_error(labels, predictions, weights=None) -> MetricPair:
    """Streaming weighted mean of per-example squared error."""
    from . import losses

    per = losses.per_example_mean_squared_error(predictions, labels)
    return _streaming_weighted_mean("mse", per, weights)


_KINDS = {
    "mean": lambda labels, predictions, weights: mean(predictions, weights),
    "accuracy": accuracy,
    "mse": mean_squared_error,
    "average_loss": lambda labels, predictions, weights: average_loss(predictions, weights),
}


def metric(kind: str, labels, predictions, weights=None) -> MetricPair:
    """Dispatch by kind: mean, accuracy, mse, average_loss.

    For mean/average_loss the predictions argument carries the value stream.
    """
    fn = _KINDS.get(kind)
    if fn is None:
        raise ValueError(f"unknown metric kind {kind!r}; expected one of {sorted(_KINDS)}")
    return fn(labels, predictions, weights)
