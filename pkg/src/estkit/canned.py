"""Prebuilt estimators: subclasses that only override their constructors.

Each constructor compiles its arguments into a JSON-able model description,
builds the model_fn from that description, and hands everything to the plain
Estimator. Exports carry the same description, so a served model rebuilds the
identical model_fn from the manifest alone.

Default optimizers: Adagrad (lr 0.05) on linear paths, SGD (lr 0.05) on deep
paths. The combined estimator trains both towers jointly in one atomic step.
"""
from __future__ import annotations

from typing import Optional, Sequence

from . import feature_columns as fc
from . import layers
from . import heads
from .errors import ConfigError
from .estimator import Estimator, RunConfig
from .graph import get_default_graph
from .modes import Mode
from .optimizers import Adagrad, Sgd, joint_train_op
from . import ops

LINEAR_COLUMN_TYPES = (fc.NumericColumn, fc.BucketizedColumn,
                       fc.HashedCategoricalColumn, fc.CrossedColumn)
DEEP_COLUMN_TYPES = (fc.NumericColumn, fc.BucketizedColumn, fc.IndicatorColumn,
                     fc.EmbeddingColumn, fc.SharedEmbeddingColumn)

DEFAULT_LINEAR_OPTIMIZER = {"kind": "adagrad", "learning_rate": 0.05}
DEFAULT_DEEP_OPTIMIZER = {"kind": "sgd", "learning_rate": 0.05}


def _optimizer_from(spec: dict):
    kind = spec.get("kind")
    lr = spec.get("learning_rate", 0.05)
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adagrad":
        return Adagrad(lr)
    raise ConfigError(f"optimizer.kind must be 'sgd' or 'adagrad', got {kind!r}")


def _check_columns(columns: Sequence, allowed, path: str):
    if not columns:
        raise ConfigError(f"{path}: at least one feature column is required")
    for column in columns:
        if not isinstance(column, allowed):
            raise ConfigError(
                f"{path}: column type {type(column).__name__} is not usable on "
                f"this path")


def _head_from_description(model: dict) -> heads.Head:
    label_name = model.get("label_name", "label")
    weight_column = model.get("weight_column")
    if model["task"] == "classify":
        return heads.multi_class_head(model["n_classes"], label_name=label_name,
                                      weight_column=weight_column)
    return heads.regression_head(model.get("label_dim", 1), label_name=label_name,
                                 weight_column=weight_column)


def _output_signature(model: dict) -> dict:
    if model["task"] == "classify":
        n = model["n_classes"]
        return {"logits": [n], "probabilities": [n], "class_id": []}
    return {"value": [model.get("label_dim", 1)]}


def _dnn_tower(features, columns, hidden_units, activation, dropout, mode):
    net = fc.input_layer(features, columns)
    for i, units in enumerate(hidden_units):
        net = layers.dense(net, units, activation=activation,
                           scope=f"dnn/hidden_{i}")
        if dropout and mode == Mode.TRAIN:
            net = layers.dropout(net, dropout, training=True)
    return net


def _linear_model_fn(features, labels, mode, params):
    model = params["model"]
    columns = fc.columns_from_spec(model["feature_spec"])
    head = _head_from_description(model)
    logits = fc.linear_model(features, columns, units=head.logits_dimension)
    optimizer = _optimizer_from(model["optimizer"])
    return head.create_estimator_spec(
        features, mode, logits, labels=labels,
        train_op_fn=lambda loss: optimizer.minimize(loss))


def _dnn_model_fn(features, labels, mode, params):
    model = params["model"]
    columns = fc.columns_from_spec(model["feature_spec"])
    head = _head_from_description(model)
    net = _dnn_tower(features, columns, model["hidden_units"],
                     model.get("activation", "relu"), model.get("dropout", 0.0),
                     mode)
    optimizer = _optimizer_from(model["optimizer"])
    return head.create_estimator_spec(
        features, mode, net, labels=labels,
        train_op_fn=lambda loss: optimizer.minimize(loss))


def _combined_model_fn(features, labels, mode, params):
    model = params["model"]
    linear_columns = fc.columns_from_spec(model["linear_feature_spec"])
    dnn_columns = fc.columns_from_spec(model["dnn_feature_spec"])
    head = _head_from_description(model)
    net = _dnn_tower(features, dnn_columns, model["hidden_units"],
                     model.get("activation", "relu"), model.get("dropout", 0.0),
                     mode)
    deep_logits = layers.dense(net, head.logits_dimension, scope="dnn/logits")
    linear_logits = fc.linear_model(features, linear_columns,
                                    units=head.logits_dimension)
    logits = ops.add(linear_logits, deep_logits)

    def train_op_fn(loss):
        graph = get_default_graph()
        deep_vars = graph.trainable_variables("dnn/")
        linear_vars = [v for v in graph.trainable_variables()
                       if not v.name.startswith("dnn/")]
        return joint_train_op(loss, [
            (_optimizer_from(model["linear_optimizer"]), linear_vars),
            (_optimizer_from(model["dnn_optimizer"]), deep_vars),
        ])

    return head.create_estimator_spec(features, mode, logits, labels=labels,
                                      train_op_fn=train_op_fn)


_MODEL_FNS = {
    "linear_classifier": _linear_model_fn,
    "linear_regressor": _linear_model_fn,
    "dnn_classifier": _dnn_model_fn,
    "dnn_regressor": _dnn_model_fn,
    "dnn_linear_combined_classifier": _combined_model_fn,
}


def build_model_fn_from_description(model: dict):
    """(model_fn, params) for a model description, as stored in exports."""
    estimator_type = model.get("estimator_type")
    model_fn = _MODEL_FNS.get(estimator_type)
    if model_fn is None:
        raise ConfigError(
            f"estimator_type must be one of {sorted(_MODEL_FNS)}, got "
            f"{estimator_type!r}")
    return model_fn, {"model": model}


def _export_metadata(model: dict, columns) -> dict:
    return {
        "model": model,
        "feature_spec": fc.columns_to_spec(columns),
        "columns": sorted(fc.referenced_feature_names(columns)),
        "outputs": _output_signature(model),
    }


def _validate_common(model: dict):
    if model["task"] == "classify" and model["n_classes"] < 2:
        raise ConfigError(
            f"n_classes must be >= 2, got {model['n_classes']}")
    if model["task"] == "regress" and model.get("label_dim", 1) < 1:
        raise ConfigError(f"label_dim must be >= 1, got {model.get('label_dim')}")
    dropout = model.get("dropout", 0.0)
    if not 0.0 <= dropout < 1.0:
        raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
    if "hidden_units" in model:
        units = model["hidden_units"]
        if not units or any(u < 1 for u in units):
            raise ConfigError(
                f"hidden_units must be a non-empty list of positive ints, "
                f"got {units}")


class _CannedEstimator(Estimator):
    """Constructor-only specialization: compile a description, delegate."""

    def __init__(self, model: dict, all_columns, config: RunConfig):
        _validate_common(model)
        model_fn, params = build_model_fn_from_description(model)
        super().__init__(model_fn, params, config)
        self.export_metadata = _export_metadata(model, all_columns)


class LinearClassifier(_CannedEstimator):
    def __init__(self, feature_columns: Sequence, n_classes: int = 2,
                 config: Optional[RunConfig] = None, label_name: str = "label",
                 weight_column: Optional[str] = None,
                 optimizer: Optional[dict] = None):
        _check_columns(feature_columns, LINEAR_COLUMN_TYPES, "feature_columns")
        model = {
            "estimator_type": "linear_classifier",
            "task": "classify",
            "n_classes": n_classes,
            "feature_spec": fc.columns_to_spec(feature_columns),
            "optimizer": optimizer or dict(DEFAULT_LINEAR_OPTIMIZER),
            "label_name": label_name,
            "weight_column": weight_column,
        }
        super().__init__(model, feature_columns, config)


class LinearRegressor(_CannedEstimator):
    def __init__(self, feature_columns: Sequence, label_dim: int = 1,
                 config: Optional[RunConfig] = None, label_name: str = "label",
                 weight_column: Optional[str] = None,
                 optimizer: Optional[dict] = None):
        _check_columns(feature_columns, LINEAR_COLUMN_TYPES, "feature_columns")
        model = {
            "estimator_type": "linear_regressor",
            "task": "regress",
            "label_dim": label_dim,
            "feature_spec": fc.columns_to_spec(feature_columns),
            "optimizer": optimizer or dict(DEFAULT_LINEAR_OPTIMIZER),
            "label_name": label_name,
            "weight_column": weight_column,
        }
        super().__init__(model, feature_columns, config)


class DNNClassifier(_CannedEstimator):
    def __init__(self, hidden_units: Sequence[int], feature_columns: Sequence,
                 n_classes: int = 2, config: Optional[RunConfig] = None,
                 activation: str = "relu", dropout: float = 0.0,
                 label_name: str = "label", weight_column: Optional[str] = None,
                 optimizer: Optional[dict] = None):
        _check_columns(feature_columns, DEEP_COLUMN_TYPES, "feature_columns")
        model = {
            "estimator_type": "dnn_classifier",
            "task": "classify",
            "n_classes": n_classes,
            "hidden_units": list(hidden_units),
            "activation": activation,
            "dropout": dropout,
            "feature_spec": fc.columns_to_spec(feature_columns),
            "optimizer": optimizer or dict(DEFAULT_DEEP_OPTIMIZER),
            "label_name": label_name,
            "weight_column": weight_column,
        }
        super().__init__(model, feature_columns, config)


class DNNRegressor(_CannedEstimator):
    def __init__(self, hidden_units: Sequence[int], feature_columns: Sequence,
                 label_dim: int = 1, config: Optional[RunConfig] = None,
                 activation: str = "relu", dropout: float = 0.0,
                 label_name: str = "label", weight_column: Optional[str] = None,
                 optimizer: Optional[dict] = None):
        _check_columns(feature_columns, DEEP_COLUMN_TYPES, "feature_columns")
        model = {
            "estimator_type": "dnn_regressor",
            "task": "regress",
            "label_dim": label_dim,
            "hidden_units": list(hidden_units),
            "activation": activation,
            "dropout": dropout,
            "feature_spec": fc.columns_to_spec(feature_columns),
            "optimizer": optimizer or dict(DEFAULT_DEEP_OPTIMIZER),
            "label_name": label_name,
            "weight_column": weight_column,
        }
        super().__init__(model, feature_columns, config)


class DNNLinearCombinedClassifier(_CannedEstimator):
    def __init__(self, linear_feature_columns: Sequence,
                 dnn_feature_columns: Sequence, dnn_hidden_units: Sequence[int],
                 n_classes: int = 2, config: Optional[RunConfig] = None,
                 activation: str = "relu", dropout: float = 0.0,
                 label_name: str = "label", weight_column: Optional[str] = None,
                 linear_optimizer: Optional[dict] = None,
                 dnn_optimizer: Optional[dict] = None):
        _check_columns(linear_feature_columns, LINEAR_COLUMN_TYPES,
                       "linear_feature_columns")
        _check_columns(dnn_feature_columns, DEEP_COLUMN_TYPES,
                       "dnn_feature_columns")
        model = {
            "estimator_type": "dnn_linear_combined_classifier",
            "task": "classify",
            "n_classes": n_classes,
            "hidden_units": list(dnn_hidden_units),
            "activation": activation,
            "dropout": dropout,
            "linear_feature_spec": fc.columns_to_spec(linear_feature_columns),
            "dnn_feature_spec": fc.columns_to_spec(dnn_feature_columns),
            "linear_optimizer": linear_optimizer or dict(DEFAULT_LINEAR_OPTIMIZER),
            "dnn_optimizer": dnn_optimizer or dict(DEFAULT_DEEP_OPTIMIZER),
            "label_name": label_name,
            "weight_column": weight_column,
        }
        all_columns = list(linear_feature_columns) + [
            c for c in dnn_feature_columns if c not in linear_feature_columns]
        super().__init__(model, all_columns, config)


CANNED_TYPES = {
    "linear_classifier": LinearClassifier,
    "linear_regressor": LinearRegressor,
    "dnn_classifier": DNNClassifier,
    "dnn_regressor": DNNRegressor,
    "dnn_linear_combined_classifier": DNNLinearCombinedClassifier,
}


def linear_classifier(feature_columns, **kwargs) -> LinearClassifier:
    return LinearClassifier(feature_columns, **kwargs)


def linear_regressor(feature_columns, **kwargs) -> LinearRegressor:
    return LinearRegressor(feature_columns, **kwargs)


def dnn_classifier(hidden_units, feature_columns, **kwargs) -> DNNClassifier:
    return DNNClassifier(hidden_units, feature_columns, **kwargs)


def dnn_regressor(hidden_units, feature_columns, **kwargs) -> DNNRegressor:
    return DNNRegressor(hidden_units, feature_columns, **kwargs)


def dnn_linear_combined_classifier(linear_feature_columns, dnn_feature_columns,
                                   dnn_hidden_units,
                                   **kwargs) -> DNNLinearCombinedClassifier:
    return DNNLinearCombinedClassifier(linear_feature_columns,
                                       dnn_feature_columns, dnn_hidden_units,
                                       **kwargs)
