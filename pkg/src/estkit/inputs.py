"""Input plumbing between pull-based batch iterators and graph placeholders.

The estimator peeks the first batch of an input_fn to decide, per feature, how
it enters the graph: numeric values become typed placeholders (the features
dict the model_fn sees maps name -> Tensor), string-valued features stay raw
(name -> RawFeature) for feature columns to encode at feed time. Every
placeholder registers a feed binding (placeholder, encoder) on the graph;
feed_for_batch replays all bindings against one raw batch.
"""
from __future__ import annotations

from typing import Iterable, Iterator, Optional, Tuple

import numpy as np

from .errors import ExecutionError
from .feature_columns import RawFeature
from .graph import Graph, Tensor


def split_batch(batch) -> Tuple[dict, Optional[dict]]:
    """(features, labels) tuple or bare features dict -> (features, labels|None)."""
    if isinstance(batch, tuple):
        if len(batch) != 2:
            raise ValueError(
                f"input batches must be (features, labels) pairs or a features "
                f"dict, got a tuple of length {len(batch)}")
        features, labels = batch
    else:
        features, labels = batch, None
    if not isinstance(features, dict):
        raise TypeError(f"batch features must be a dict, got {type(features).__name__}")
    if labels is not None and not isinstance(labels, dict):
        raise TypeError(f"batch labels must be a dict, got {type(labels).__name__}")
    return features, labels


def _classify(name: str, value) -> str:
    """"dense" for numeric arrays, "categorical" for string/nested values."""
    if isinstance(value, np.ndarray):
        return "dense" if value.dtype.kind in "iufb" else "categorical"
    if isinstance(value, (list, tuple)):
        for item in value:
            if isinstance(item, (str, bytes)):
                return "categorical"
            if isinstance(item, (list, tuple, np.ndarray)):
                return "categorical"
            if isinstance(item, (int, float, np.number)):
                return "dense"
        return "categorical"  # all examples empty: only categorical admits that
    raise TypeError(
        f"feature {name!r}: expected an array or a list of values, "
        f"got {type(value).__name__}")


def _dense_feature_array(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError(f"feature {name!r}: expected one value per example, got a scalar")
    if arr.ndim == 1:
        arr = arr[:, None]  # single-valued features are (batch, 1) to columns
    return arr


def _label_array(name: str, value, dtype: str) -> np.ndarray:
    kind = np.int64 if dtype == "int" else np.float64
    return np.asarray(value, dtype=kind)


def _merge_raw(features: dict, labels: Optional[dict]) -> dict:
    if not labels:
        return features
    overlap = set(features) & set(labels)
    if overlap:
        raise ValueError(
            f"label names collide with feature names: {sorted(overlap)}")
    merged = dict(features)
    merged.update(labels)
    return merged


class InputPlumbing:
    """Typed graph inputs for one input pipeline, built from its first batch."""

    def __init__(self, graph: Graph, first_features: dict,
                 first_labels: Optional[dict] = None):
        self.graph = graph
        self.features: dict = {}
        self.labels: Optional[dict] = None
        for name in first_features:
            kind = _classify(name, first_features[name])
            if kind == "categorical":
                self.features[name] = RawFeature(name)
                continue
            sample = _dense_feature_array(name, first_features[name])
            ph = graph.placeholder(name, (None,) + sample.shape[1:])
            graph.feed_bindings.append(
                (ph, _dense_encoder(name)))
            self.features[name] = ph
        if first_labels is not None:
            if not first_labels:
                raise ValueError("labels dict is empty; omit labels instead")
            _merge_raw(first_features, first_labels)  # collision check
            self.labels = {}
            for name, value in first_labels.items():
                arr = np.asarray(value)
                dtype = "int" if arr.dtype.kind in "iu" else "float"
                shape = (None,) + arr.shape[1:]
                ph = graph.placeholder(name, shape, dtype=dtype)
                graph.feed_bindings.append(
                    (ph, _label_encoder(name, dtype)))
                self.labels[name] = ph

    def feed_for_batch(self, features: dict, labels: Optional[dict] = None) -> dict:
        """Evaluate every registered binding against one raw batch."""
        raw = _merge_raw(features, labels)
        feed = {}
        for ph, encoder in self.graph.feed_bindings:
            feed[ph] = encoder(raw)
        return feed


def _dense_encoder(name: str):
    def encode(raw: dict):
        if name not in raw:
            raise ExecutionError(f"feature {name!r} missing from input batch")
        return _dense_feature_array(name, raw[name])

    return encode


def _label_encoder(name: str, dtype: str):
    def encode(raw: dict):
        if name not in raw:
            raise ExecutionError(f"label {name!r} missing from input batch")
        return _label_array(name, raw[name], dtype)

    return encode


def batch_size_of(features: dict) -> int:
    for value in features.values():
        return len(value)
    raise ValueError("empty features dict has no batch size")


def peek_iterator(source: Iterable) -> Tuple[object, Iterator]:
    """First element plus an iterator that replays it."""
    import itertools

    it = iter(source)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("input_fn produced no batches") from None
    return first, itertools.chain([first], it)
