"""Heads: everything behind the last hidden layer.

A Head turns logits (or the last hidden activation, in which case the head
appends its own logits layer under its head_name scope) plus labels into the
loss, predictions, and streaming metrics for one objective. multi_head
composes several objectives into one spec with a single train op on the
weighted total loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import layers, losses, metrics, ops
from .graph import Tensor, get_default_graph
from .metrics import MetricPair
from .modes import Mode


@dataclass
class EstimatorSpec:
    """What a model_fn returns; fields are present exactly per mode.

    TRAIN: loss and train_op required, no eval_metrics.
    EVAL: loss and eval_metrics required, no train_op.
    PREDICT: predictions only.
    export_outputs defaults to the predictions map.
    """

    mode: Mode
    predictions: dict
    loss: Optional[Tensor] = None
    train_op: Optional[Tensor] = None
    eval_metrics: Optional[dict] = None
    export_outputs: Optional[dict] = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not isinstance(self.predictions, dict) or not self.predictions:
            raise ValueError("EstimatorSpec: predictions must be a non-empty dict")
        if self.loss is not None and self.loss.shape != ():
            raise ValueError(
                f"EstimatorSpec: loss must be a scalar, got shape {self.loss.shape}")
        if self.mode == Mode.TRAIN:
            if self.loss is None:
                raise ValueError("EstimatorSpec: TRAIN mode requires a loss")
            if self.train_op is None:
                raise ValueError("EstimatorSpec: TRAIN mode requires a train_op")
            if self.eval_metrics:
                raise ValueError("EstimatorSpec: eval_metrics are EVAL-only")
        elif self.mode == Mode.EVAL:
            if self.loss is None:
                raise ValueError("EstimatorSpec: EVAL mode requires a loss")
            if self.train_op is not None:
                raise ValueError("EstimatorSpec: train_op is TRAIN-only")
            if self.eval_metrics is None:
                self.eval_metrics = {}
        else:
            if self.loss is not None:
                raise ValueError("EstimatorSpec: PREDICT mode carries no loss")
            if self.train_op is not None:
                raise ValueError("EstimatorSpec: train_op is TRAIN-only")
            if self.eval_metrics:
                raise ValueError("EstimatorSpec: eval_metrics are EVAL-only")
        if self.export_outputs is None:
            self.export_outputs = dict(self.predictions)


@dataclass(frozen=True)
class _HeadParts:
    predictions: dict
    loss: Optional[Tensor]
    eval_metrics: dict


class Head:
    """Base head: loss/prediction/metric assembly shared by all variants."""

    def __init__(self, label_name: str = "label", head_name: str = "head",
                 weight_column: Optional[str] = None):
        self.label_name = label_name
        self.head_name = head_name
        self.weight_column = weight_column

    @property
    def logits_dimension(self) -> int:
        raise NotImplementedError

    # -- shared plumbing -----------------------------------------------------

    def _resolve_logits(self, net: Tensor) -> Tensor:
        """net is logits if its width already matches; otherwise append a layer."""
        if len(net.shape) != 2:
            raise ValueError(
                f"head {self.head_name!r}: expected a rank-2 input, got "
                f"{ops.format_shape(net.shape)}")
        if net.shape[1] == self.logits_dimension:
            return net
        return layers.dense(net, self.logits_dimension,
                            scope=f"{self.head_name}/logits")

    def _label_tensor(self, labels) -> Tensor:
        if labels is None:
            raise ValueError(
                f"head {self.head_name!r}: labels are required in TRAIN/EVAL")
        if isinstance(labels, Tensor):
            return labels
        if isinstance(labels, dict):
            if self.label_name not in labels:
                raise ValueError(
                    f"head {self.head_name!r}: labels missing required key "
                    f"{self.label_name!r}")
            return labels[self.label_name]
        raise TypeError(
            f"head {self.head_name!r}: labels must be a dict or a Tensor, "
            f"got {type(labels).__name__}")

    def _weights(self, features: dict):
        if self.weight_column is None:
            return None
        value = features.get(self.weight_column)
        if value is None:
            raise ValueError(
                f"head {self.head_name!r}: weight column {self.weight_column!r} "
                f"missing from features")
        if not isinstance(value, Tensor):
            raise TypeError(
                f"head {self.head_name!r}: weight column {self.weight_column!r} "
                f"must be a dense feature")
        if len(value.shape) == 2 and value.shape[1] == 1:
            return ops.reshape(value, (-1,))
        if len(value.shape) == 1:
            return value
        raise ValueError(
            f"head {self.head_name!r}: weight column must be one value per "
            f"example, got {ops.format_shape(value.shape)}")

    # -- per-variant hooks -----------------------------------------------------

    def _predictions(self, logits: Tensor) -> dict:
        raise NotImplementedError

    def _per_example_loss(self, logits: Tensor, label: Tensor) -> Tensor:
        raise NotImplementedError

    def _eval_metrics(self, predictions: dict, label: Tensor,
                      per_example: Tensor, weights) -> dict:
        raise NotImplementedError

    # -- assembly --------------------------------------------------------------

    def _build(self, features: dict, mode: Mode, net: Tensor, labels) -> _HeadParts:
        logits = self._resolve_logits(net)
        predictions = self._predictions(logits)
        if mode == Mode.PREDICT:
            return _HeadParts(predictions, None, {})
        label = self._normalize_label(self._label_tensor(labels))
        weights = self._weights(features)
        per_example = self._per_example_loss(logits, label)
        loss = losses.weighted_mean(per_example, weights)
        if mode == Mode.TRAIN:
            return _HeadParts(predictions, loss, {})
        return _HeadParts(predictions, loss,
                          self._eval_metrics(predictions, label, per_example, weights))

    def _normalize_label(self, label: Tensor) -> Tensor:
        return label

    def create_estimator_spec(self, features: dict, mode, net: Tensor,
                              labels=None, train_op_fn: Optional[Callable] = None
                              ) -> EstimatorSpec:
        mode = Mode(mode)
        parts = self._build(features, mode, net, labels)
        if mode == Mode.PREDICT:
            return EstimatorSpec(mode, parts.predictions)
        if mode == Mode.TRAIN:
            if train_op_fn is None:
                raise ValueError(
                    f"head {self.head_name!r}: train_op_fn is required in TRAIN mode")
            return EstimatorSpec(mode, parts.predictions, loss=parts.loss,
                                 train_op=train_op_fn(parts.loss))
        return EstimatorSpec(mode, parts.predictions, loss=parts.loss,
                             eval_metrics=parts.eval_metrics)


class MultiClassHead(Head):
    """Softmax cross-entropy over n_classes; integer class-id labels."""

    def __init__(self, n_classes: int, label_name: str = "label",
                 head_name: str = "head", weight_column: Optional[str] = None):
        if n_classes < 2:
            raise ValueError(f"multi_class head: n_classes must be >= 2, got {n_classes}")
        super().__init__(label_name, head_name, weight_column)
        self.n_classes = n_classes

    @property
    def logits_dimension(self) -> int:
        return self.n_classes

    def _normalize_label(self, label: Tensor) -> Tensor:
        if len(label.shape) == 2 and label.shape[1] == 1:
            label = ops.reshape(label, (-1,))
        if len(label.shape) != 1:
            raise ValueError(
                f"head {self.head_name!r}: labels must be (batch,) class ids, "
                f"got {ops.format_shape(label.shape)}")
        if label.dtype != "int":
            label = ops.cast_int(label)
        return label

    def _predictions(self, logits: Tensor) -> dict:
        probabilities = ops.softmax(logits)
        return {"logits": logits, "probabilities": probabilities,
                "class_id": ops.argmax(probabilities)}

    def _per_example_loss(self, logits: Tensor, label: Tensor) -> Tensor:
        return losses.per_example_softmax_cross_entropy(logits, label)

    def _eval_metrics(self, predictions, label, per_example, weights) -> dict:
        return {
            "accuracy": metrics.accuracy(label, predictions["probabilities"], weights),
            "average_loss": metrics.average_loss(per_example, weights),
        }


class BinaryHead(Head):
    """Logistic loss on width-1 logits; 0/1 labels."""

    @property
    def logits_dimension(self) -> int:
        return 1

    def _normalize_label(self, label: Tensor) -> Tensor:
        if len(label.shape) == 2 and label.shape[1] == 1:
            label = ops.reshape(label, (-1,))
        if len(label.shape) != 1:
            raise ValueError(
                f"head {self.head_name!r}: labels must be (batch,) 0/1 values, "
                f"got {ops.format_shape(label.shape)}")
        if label.dtype != "float":
            label = ops.cast_float(label)
        return label

    def _predictions(self, logits: Tensor) -> dict:
        # Two-column probabilities [P(0), P(1)] keep class_id = argmax uniform
        # across head variants.
        positive = ops.sigmoid(logits)
        probabilities = ops.concat([ops.sub(1.0, positive), positive], axis=1)
        return {"logits": logits, "probabilities": probabilities,
                "class_id": ops.argmax(probabilities)}

    def _per_example_loss(self, logits: Tensor, label: Tensor) -> Tensor:
        return losses.per_example_sigmoid_cross_entropy(
            ops.reshape(logits, (-1,)), label)

    def _eval_metrics(self, predictions, label, per_example, weights) -> dict:
        return {
            "accuracy": metrics.accuracy(label, predictions["probabilities"], weights),
            "average_loss": metrics.average_loss(per_example, weights),
        }


class RegressionHead(Head):
    """Mean-squared-error regression with label_dim output values."""

    def __init__(self, label_dim: int = 1, label_name: str = "label",
                 head_name: str = "head", weight_column: Optional[str] = None):
        if label_dim < 1:
            raise ValueError(f"regression head: label_dim must be >= 1, got {label_dim}")
        super().__init__(label_name, head_name, weight_column)
        self.label_dim = label_dim

    @property
    def logits_dimension(self) -> int:
        return self.label_dim

    def _normalize_label(self, label: Tensor) -> Tensor:
        if label.dtype != "float":
            label = ops.cast_float(label)
        if len(label.shape) == 1:
            if self.label_dim != 1:
                raise ValueError(
                    f"head {self.head_name!r}: labels must be (batch, "
                    f"{self.label_dim}), got {ops.format_shape(label.shape)}")
            return ops.reshape(label, (-1, 1))
        if len(label.shape) != 2 or (label.shape[1] is not None
                                     and label.shape[1] != self.label_dim):
            raise ValueError(
                f"head {self.head_name!r}: labels must be (batch, {self.label_dim}), "
                f"got {ops.format_shape(label.shape)}")
        return label

    def _predictions(self, logits: Tensor) -> dict:
        return {"value": logits}

    def _per_example_loss(self, logits: Tensor, label: Tensor) -> Tensor:
        return losses.per_example_mean_squared_error(logits, label)

    def _eval_metrics(self, predictions, label, per_example, weights) -> dict:
        return {"average_loss": metrics.average_loss(per_example, weights)}


class MultiHead(Head):
    """Weighted combination of child heads: one loss, namespaced outputs."""

    def __init__(self, children: Sequence[Head], loss_weights: Sequence[float]):
        if not children:
            raise ValueError("multi_head: needs at least one child head")
        if len(children) != len(loss_weights):
            raise ValueError(
                f"multi_head: {len(children)} children but "
                f"{len(loss_weights)} loss_weights")
        names = [c.head_name for c in children]
        if len(set(names)) != len(names):
            raise ValueError(f"multi_head: duplicate child head_names in {names}")
        super().__init__(head_name="multi_head")
        self.children = list(children)
        self.loss_weights = [float(w) for w in loss_weights]

    @property
    def logits_dimension(self) -> int:
        return sum(c.logits_dimension for c in self.children)

    def _split_logits(self, logits: Tensor) -> list:
        graph = get_default_graph()
        total = self.logits_dimension
        out = []
        offset = 0
        for child in self.children:
            d = child.logits_dimension
            selector = np.zeros((total, d), dtype=np.float64)
            selector[offset:offset + d] = np.eye(d)
            out.append(ops.matmul(logits, graph.constant(selector)))
            offset += d
        return out

    def _build(self, features: dict, mode: Mode, net: Tensor, labels) -> _HeadParts:
        if len(net.shape) != 2:
            raise ValueError(
                f"multi_head: expected a rank-2 input, got {ops.format_shape(net.shape)}")
        if net.shape[1] == self.logits_dimension:
            child_inputs = self._split_logits(net)
        else:
            child_inputs = [net] * len(self.children)
        predictions: dict = {}
        eval_metrics: dict = {}
        total_loss = None
        for child, child_net, weight in zip(self.children, child_inputs,
                                            self.loss_weights):
            parts = child._build(features, mode, child_net, labels)
            for key, value in parts.predictions.items():
                predictions[f"{child.head_name}/{key}"] = value
            for key, value in parts.eval_metrics.items():
                eval_metrics[f"{child.head_name}/{key}"] = value
            if parts.loss is not None:
                term = ops.mul(parts.loss, weight)
                total_loss = term if total_loss is None else ops.add(total_loss, term)
        return _HeadParts(predictions, total_loss, eval_metrics)


def multi_class_head(n_classes: int, label_name: str = "label",
                     head_name: str = "head",
                     weight_column: Optional[str] = None) -> MultiClassHead:
    return MultiClassHead(n_classes, label_name, head_name, weight_column)


def binary_head(label_name: str = "label", head_name: str = "head",
                weight_column: Optional[str] = None) -> BinaryHead:
    return BinaryHead(label_name, head_name, weight_column)


def regression_head(label_dim: int = 1, label_name: str = "label",
                    head_name: str = "head",
                    weight_column: Optional[str] = None) -> RegressionHead:
    return RegressionHead(label_dim, label_name, head_name, weight_column)


def multi_head(children: Sequence[Head], loss_weights: Sequence[float]) -> MultiHead:
    return MultiHead(children, loss_weights)


def create_estimator_spec(head: Head, features: dict, mode, net: Tensor,
                          labels=None, train_op_fn=None) -> EstimatorSpec:
    """Free-function spelling of Head.create_estimator_spec."""
    return head.create_estimator_spec(features, mode, net, labels=labels,
                                      train_op_fn=train_op_fn)
