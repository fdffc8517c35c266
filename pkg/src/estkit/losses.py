"""Scalar losses: per-example terms reduced by a weighted mean over the batch.

Each public loss returns a scalar tensor. The per_example_* variants return
the [batch] vector before reduction; heads stream those through metrics.
Weights are per-example ([batch] tensor/array) or a python number applied
uniformly; all-zero weights yield loss 0 rather than a division error.
"""
from __future__ import annotations

from numbers import Number
from typing import Optional

from . import ops
from .graph import Tensor, get_default_graph


def _check_batch_dims(a: Tensor, b: Tensor, op_name: str) -> None:
    da, db = a.shape[0], b.shape[0]
    if da is not None and db is not None and da != db:
        raise ValueError(
            f"{op_name}: batch dims disagree between {ops.format_shape(a.shape)} "
            f"and {ops.format_shape(b.shape)}")


def _per_example_weights(weights, per_example: Tensor):
    """Validate weights against a [batch] per-example vector.

    Returns (weights tensor or None, build-time-zero flag).
    """
    if weights is None:
        return None, False
    if isinstance(weights, Number):
        if weights < 0:
            raise ValueError(f"weights must be >= 0, got {weights}")
        return None, weights == 0
    graph = get_default_graph()
    wt = graph.as_tensor(weights)
    if len(wt.shape) != 1:
        raise ValueError(
            f"weights must be per-example with shape (batch,), got {ops.format_shape(wt.shape)}")
    _check_batch_dims(wt, per_example, "weights")
    return wt, False


def weighted_mean(per_example: Tensor, weights) -> Tensor:
    """Sum(w*x)/Sum(w) over the batch; plain mean when weights are uniform."""
    wt, zero = _per_example_weights(weights, per_example)
    if zero:
        return get_default_graph().constant(0.0)
    if wt is None:
        return ops.reduce_mean(per_example)
    return ops.div_no_nan(ops.reduce_sum(ops.mul(per_example, wt)),
                          ops.reduce_sum(wt))


def _per_example_diff(predictions, labels, op_name: str, reducer: str) -> Tensor:
    graph = get_default_graph()
    pt = graph.as_tensor(predictions)
    lt = graph.as_tensor(labels)
    if len(pt.shape) not in (1, 2) or len(pt.shape) != len(lt.shape):
        raise ValueError(
            f"{op_name}: expected matching rank-1 or rank-2 tensors, got "
            f"{ops.format_shape(pt.shape)} and {ops.format_shape(lt.shape)}")
    _check_batch_dims(pt, lt, op_name)
    diff = ops.sub(pt, lt)
    if reducer == "l1":
        # |d| as relu(d) + relu(-d); keeps the op set minimal.
        term = ops.add(ops.relu(diff), ops.relu(ops.neg(diff)))
        return term if len(pt.shape) == 1 else ops.reduce_sum(term, axis=1)
    sq = ops.mul(diff, diff)
    if len(pt.shape) == 1:
        return sq
    if reducer == "sum":
        return ops.reduce_sum(sq, axis=1)
    return ops.reduce_mean(sq, axis=1)


def per_example_l1(predictions, labels) -> Tensor:
    """Sum of absolute errors per example."""
    return _per_example_diff(predictions, labels, "l1_loss", "l1")


def per_example_l2(predictions, labels) -> Tensor:
    """Half the sum of squared errors per example."""
    per = _per_example_diff(predictions, labels, "l2_loss", "sum")
    return ops.mul(per, 0.5)


def per_example_mean_squared_error(predictions, labels) -> Tensor:
    """Mean of squared errors per example."""
    return _per_example_diff(predictions, labels, "mean_squared_error", "mean")


def per_example_softmax_cross_entropy(logits, labels) -> Tensor:
    """-log softmax(logits)[label] per example; labels are integer class ids."""
    graph = get_default_graph()
    lt = graph.as_tensor(logits)
    yt = graph.as_tensor(labels, dtype="int")
    if len(lt.shape) != 2 or lt.shape[1] is None:
        raise ValueError(
            f"softmax_cross_entropy: logits must be (batch, classes) with known "
            f"width, got {ops.format_shape(lt.shape)}")
    if len(yt.shape) != 1:
        raise ValueError(
            f"softmax_cross_entropy: labels must be (batch,) integers, got "
            f"{ops.format_shape(yt.shape)}")
    _check_batch_dims(lt, yt, "softmax_cross_entropy")
    hot = ops.one_hot(yt, lt.shape[1])
    return ops.neg(ops.reduce_sum(ops.mul(hot, ops.log_softmax(lt)), axis=1))


def per_example_sigmoid_cross_entropy(logits, labels) -> Tensor:
    """Stable elementwise logistic loss, summed over non-batch dims."""
    graph = get_default_graph()
    lt = graph.as_tensor(logits)
    yt = graph.as_tensor(labels)
    if len(lt.shape) not in (1, 2) or len(lt.shape) != len(yt.shape):
        raise ValueError(
            f"sigmoid_cross_entropy: expected matching rank-1 or rank-2 tensors, "
            f"got {ops.format_shape(lt.shape)} and {ops.format_shape(yt.shape)}")
    _check_batch_dims(lt, yt, "sigmoid_cross_entropy")
    per = ops.sigmoid_cross_entropy(lt, yt)
    return per if len(lt.shape) == 1 else ops.reduce_sum(per, axis=1)


def l1_loss(predictions, labels, weights=None) -> Tensor:
    return weighted_mean(per_example_l1(predictions, labels), weights)


def l2_loss(predictions, labels, weights=None) -> Tensor:
    return weighted_mean(per_example_l2(predictions, labels), weights)


def mean_squared_error(predictions, labels, weights=None) -> Tensor:
    return weighted_mean(per_example_mean_squared_error(predictions, labels), weights)


def softmax_cross_entropy(logits, labels, weights=None) -> Tensor:
    return weighted_mean(per_example_softmax_cross_entropy(logits, labels), weights)


def sigmoid_cross_entropy(logits, labels, weights=None) -> Tensor:
    return weighted_mean(per_example_sigmoid_cross_entropy(logits, labels), weights)


_KINDS = {
    "l1": l1_loss,
    "l2": l2_loss,
    "mean_squared_error": mean_squared_error,
    "softmax_cross_entropy": softmax_cross_entropy,
    "sigmoid_cross_entropy": sigmoid_cross_entropy,
}


def loss(kind: str, predictions_or_logits, labels, weights=None) -> Tensor:
    """Dispatch by kind; see _KINDS for the supported set."""
    fn = _KINDS.get(kind)
    if fn is None:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(_KINDS)}")
    return fn(predictions_or_logits, labels, weights)
