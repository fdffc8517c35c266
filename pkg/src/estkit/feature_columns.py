"""Declarative feature columns compiled into dense model inputs.

Dense numeric features enter the graph as placeholders (the features dict maps
name -> Tensor). Categorical features stay raw (features dict maps name ->
RawFeature); each column that consumes one registers a feed binding on the
graph: a placeholder plus an encoder that turns the raw batch into a per-batch
matrix. Embedding/indicator/linear lookups are then plain matmuls against that
matrix, which is mathematically identical to gather-and-combine.

Hashing contract: FNV-1a 64-bit over UTF-8 bytes, unsigned modulo num_buckets.
Crossed columns join each Cartesian combination with byte 0x1f before hashing.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .errors import ExecutionError
from .graph import Tensor, get_default_graph, zeros_initializer

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_CROSS_SEPARATOR = "\x1f"

_COMBINERS = ("mean", "sum", "sqrtn")


def fnv1a_64(data: bytes) -> int:
    """FNV-1a 64-bit; stable across runs and platforms."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def hash_bucket(value: str, num_buckets: int) -> int:
    if num_buckets < 1:
        raise ValueError(f"num_buckets must be >= 1, got {num_buckets}")
    return fnv1a_64(str(value).encode("utf-8")) % num_buckets


def cross_values(parent_values: Sequence[Sequence[str]], num_buckets: int) -> list:
    """Bucket ids for the Cartesian product of parent value lists.

    Combinations are joined in declared parent order with the 0x1f separator;
    any empty parent yields an empty product.
    """
    out = []
    for combo in itertools.product(*parent_values):
        joined = _CROSS_SEPARATOR.join(str(v) for v in combo)
        out.append(hash_bucket(joined, num_buckets))
    return out


class RawFeature:
    """Handle for a categorical feature left raw until feed time."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return f"<RawFeature {self.name!r}>"


# ---------------------------------------------------------------------------
# Column variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NumericColumn:
    name: str
    dim: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"numeric column {self.name!r}: dim must be >= 1, got {self.dim}")

    @property
    def output_dim(self) -> int:
        return self.dim

    @property
    def var_key(self) -> str:
        return self.name


@dataclass(frozen=True)
class BucketizedColumn:
    source: NumericColumn
    boundaries: tuple

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.boundaries)
        if len(bounds) < 1:
            raise ValueError("bucketized column: needs at least one boundary")
        if any(b >= a for b, a in zip(bounds, bounds[1:])):
            raise ValueError(
                f"bucketized column on {self.source.name!r}: boundaries must be "
                f"strictly increasing, got {list(self.boundaries)}")
        object.__setattr__(self, "boundaries", bounds)

    @property
    def num_buckets(self) -> int:
        return len(self.boundaries) + 1

    @property
    def output_dim(self) -> int:
        return self.source.dim * self.num_buckets

    @property
    def var_key(self) -> str:
        return f"{self.source.name}_bucketized"


@dataclass(frozen=True)
class HashedCategoricalColumn:
    name: str
    num_buckets: int

    def __post_init__(self):
        if self.num_buckets < 1:
            raise ValueError(
                f"hashed column {self.name!r}: num_buckets must be >= 1, "
                f"got {self.num_buckets}")

    @property
    def var_key(self) -> str:
        return f"{self.name}_hashed"

    def ids_for_example(self, values) -> list:
        return [hash_bucket(v, self.num_buckets) for v in values]


@dataclass(frozen=True)
class CrossedColumn:
    names: tuple
    num_buckets: int

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) < 2:
            raise ValueError(f"crossed column: needs >= 2 parents, got {list(names)}")
        if self.num_buckets < 1:
            raise ValueError(
                f"crossed column {names}: num_buckets must be >= 1, got {self.num_buckets}")
        object.__setattr__(self, "names", names)

    @property
    def name(self) -> str:
        return "_x_".join(self.names)

    @property
    def var_key(self) -> str:
        return f"{self.name}_crossed"


@dataclass(frozen=True)
class IndicatorColumn:
    categorical: Union[HashedCategoricalColumn, CrossedColumn]

    @property
    def output_dim(self) -> int:
        return self.categorical.num_buckets

    @property
    def var_key(self) -> str:
        return f"{self.categorical.var_key}_indicator"


@dataclass(frozen=True)
class EmbeddingColumn:
    categorical: Union[HashedCategoricalColumn, CrossedColumn]
    dimension: int
    combiner: str = "mean"

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"embedding column: dimension must be >= 1, got {self.dimension}")
        if self.combiner not in _COMBINERS:
            raise ValueError(
                f"embedding column: combiner must be one of {_COMBINERS}, "
                f"got {self.combiner!r}")

    @property
    def output_dim(self) -> int:
        return self.dimension

    @property
    def var_key(self) -> str:
        return f"{self.categorical.var_key}_embedding"


@dataclass(frozen=True)
class SharedEmbeddingColumn:
    categorical: Union[HashedCategoricalColumn, CrossedColumn]
    dimension: int
    shared_name: str
    combiner: str = "mean"

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(
                f"shared embedding column: dimension must be >= 1, got {self.dimension}")
        if self.combiner not in _COMBINERS:
            raise ValueError(
                f"shared embedding column: combiner must be one of {_COMBINERS}, "
                f"got {self.combiner!r}")

    @property
    def output_dim(self) -> int:
        return self.dimension

    @property
    def var_key(self) -> str:
        return self.shared_name


FeatureColumn = Union[NumericColumn, BucketizedColumn, HashedCategoricalColumn,
                      CrossedColumn, IndicatorColumn, EmbeddingColumn,
                      SharedEmbeddingColumn]

_CATEGORICAL_TYPES = (HashedCategoricalColumn, CrossedColumn)


# ---------------------------------------------------------------------------
# Factories (the public construction surface)
# ---------------------------------------------------------------------------

def numeric_column(name: str, dim: int = 1) -> NumericColumn:
    return NumericColumn(name, dim)


def bucketized_column(source: NumericColumn, boundaries: Sequence[float]) -> BucketizedColumn:
    if not isinstance(source, NumericColumn):
        raise TypeError(f"bucketized_column: source must be a numeric column, got {source!r}")
    return BucketizedColumn(source, tuple(boundaries))


def categorical_column_with_hash_bucket(name: str, num_buckets: int) -> HashedCategoricalColumn:
    return HashedCategoricalColumn(name, num_buckets)


def crossed_column(names: Sequence[str], num_buckets: int) -> CrossedColumn:
    return CrossedColumn(tuple(names), num_buckets)


def indicator_column(categorical) -> IndicatorColumn:
    if not isinstance(categorical, _CATEGORICAL_TYPES):
        raise TypeError(
            f"indicator_column: expected a hashed or crossed column, got {categorical!r}")
    return IndicatorColumn(categorical)


def embedding_column(categorical, dimension: int = 32,
                     combiner: str = "mean") -> EmbeddingColumn:
    if not isinstance(categorical, _CATEGORICAL_TYPES):
        raise TypeError(
            f"embedding_column: expected a hashed or crossed column, got {categorical!r}")
    return EmbeddingColumn(categorical, dimension, combiner)


def shared_embedding_columns(categoricals: Sequence, dimension: int,
                             shared_name: str, combiner: str = "mean") -> list:
    """One column per categorical, all resolving to the same table variable."""
    if not categoricals:
        raise ValueError("shared_embedding_columns: needs at least one categorical column")
    out = []
    for cat in categoricals:
        if not isinstance(cat, _CATEGORICAL_TYPES):
            raise TypeError(
                f"shared_embedding_columns: expected hashed or crossed columns, got {cat!r}")
        if cat.num_buckets != categoricals[0].num_buckets:
            raise ValueError(
                "shared_embedding_columns: all columns must share num_buckets, "
                f"got {cat.num_buckets} and {categoricals[0].num_buckets}")
        out.append(SharedEmbeddingColumn(cat, dimension, shared_name, combiner))
    return out


# ---------------------------------------------------------------------------
# Raw-batch encoding (feed time)
# ---------------------------------------------------------------------------

def _example_values(batch: dict, name: str, row: int):
    if name not in batch:
        raise ExecutionError(f"feature {name!r} missing from input batch")
    values = batch[name][row]
    if values is None:
        return []
    if isinstance(values, (str, bytes, int)):
        return [values]
    return list(values)


def _batch_size(batch: dict, names: Sequence[str]) -> int:
    for name in names:
        if name in batch:
            return len(batch[name])
    raise ExecutionError(f"feature {names[0]!r} missing from input batch")


def _ids_per_example(categorical, batch: dict) -> list:
    if isinstance(categorical, HashedCategoricalColumn):
        n = _batch_size(batch, [categorical.name])
        return [categorical.ids_for_example(_example_values(batch, categorical.name, i))
                for i in range(n)]
    n = _batch_size(batch, categorical.names)
    out = []
    for i in range(n):
        parents = [_example_values(batch, name, i) for name in categorical.names]
        out.append(cross_values(parents, categorical.num_buckets))
    return out


def _count_matrix(categorical, batch: dict) -> np.ndarray:
    """[batch, num_buckets] occurrence counts; empty features give zero rows."""
    ids = _ids_per_example(categorical, batch)
    out = np.zeros((len(ids), categorical.num_buckets), dtype=np.float64)
    for row, row_ids in enumerate(ids):
        for b in row_ids:
            out[row, b] += 1.0
    return out


def _combiner_matrix(categorical, combiner: str, batch: dict) -> np.ndarray:
    """Counts normalized so (matrix @ table) equals the combined embedding."""
    counts = _count_matrix(categorical, batch)
    totals = counts.sum(axis=1, keepdims=True)
    if combiner == "sum":
        return counts
    if combiner == "mean":
        return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return np.divide(counts, np.sqrt(totals), out=np.zeros_like(counts),
                     where=totals > 0)


def _bound_placeholder(graph, name: str, width: int, encoder) -> Tensor:
    ph = graph.placeholder(name, (None, width))
    graph.feed_bindings.append((ph, encoder))
    return ph


def _categorical_matrix_tensor(graph, categorical, combiner: Optional[str],
                               purpose: str) -> Tensor:
    """Placeholder carrying the per-batch lookup matrix for one column."""
    if combiner is None:
        encoder = lambda batch: _count_matrix(categorical, batch)
    else:
        encoder = lambda batch: _combiner_matrix(categorical, combiner, batch)
    name = graph.unique_name(f"{categorical.var_key}_{purpose}")
    return _bound_placeholder(graph, name, categorical.num_buckets, encoder)


def _dense_feature(features: dict, column: NumericColumn) -> Tensor:
    if column.name not in features:
        raise ValueError(f"feature {column.name!r} missing from the features dict")
    value = features[column.name]
    if isinstance(value, RawFeature):
        raise ValueError(
            f"numeric column {column.name!r} expects a dense tensor, but the "
            f"feature is categorical")
    if not isinstance(value, Tensor):
        raise TypeError(
            f"feature {column.name!r}: expected a Tensor, got {type(value).__name__}")
    if len(value.shape) != 2 or (value.shape[1] is not None
                                 and value.shape[1] != column.dim):
        raise ValueError(
            f"numeric column {column.name!r} expects shape (batch, {column.dim}), "
            f"feature has {ops.format_shape(value.shape)}")
    return value


def _raw_feature(features: dict, name: str) -> RawFeature:
    if name not in features:
        raise ValueError(f"feature {name!r} missing from the features dict")
    value = features[name]
    if not isinstance(value, RawFeature):
        raise ValueError(
            f"feature {name!r} must be categorical (raw) for this column, "
            f"got {type(value).__name__}")
    return value


def _check_categorical_features(features: dict, categorical) -> None:
    names = ([categorical.name] if isinstance(categorical, HashedCategoricalColumn)
             else list(categorical.names))
    for name in names:
        _raw_feature(features, name)


def _bucketize(x: Tensor, boundaries: Sequence[float], dim: int) -> Tensor:
    """In-graph one-hot bucketization: [batch, dim] -> [batch, dim*(K+1)].

    Bucket index = number of boundaries <= value (left-inclusive buckets), so a
    value equal to a boundary falls into the upper bucket.
    """
    graph = get_default_graph()
    num_buckets = len(boundaries) + 1
    index = None
    for b in boundaries:
        term = ops.greater_equal(x, graph.constant(float(b)))
        index = term if index is None else ops.add(index, term)
    hot = ops.one_hot(ops.cast_int(index), num_buckets)
    return ops.reshape(hot, (-1, dim * num_buckets))


# ---------------------------------------------------------------------------
# input_layer / linear_model
# ---------------------------------------------------------------------------

def input_layer(features: dict, columns: Sequence[FeatureColumn]) -> Tensor:
    """Dense [batch, total_dim] input: per-column blocks in declared order."""
    if not columns:
        raise ValueError("input_layer: needs at least one column")
    graph = get_default_graph()
    blocks = []
    for column in columns:
        if isinstance(column, NumericColumn):
            blocks.append(_dense_feature(features, column))
        elif isinstance(column, BucketizedColumn):
            dense = _dense_feature(features, column.source)
            blocks.append(_bucketize(dense, column.boundaries, column.source.dim))
        elif isinstance(column, IndicatorColumn):
            _check_categorical_features(features, column.categorical)
            blocks.append(_categorical_matrix_tensor(
                graph, column.categorical, None, "indicator"))
        elif isinstance(column, (EmbeddingColumn, SharedEmbeddingColumn)):
            _check_categorical_features(features, column.categorical)
            matrix = _categorical_matrix_tensor(
                graph, column.categorical, column.combiner, "embedding")
            table = graph.get_variable(
                column.var_key, (column.categorical.num_buckets, column.dimension),
                reuse="auto")
            blocks.append(ops.matmul(matrix, table.read()))
        elif isinstance(column, _CATEGORICAL_TYPES):
            raise ValueError(
                f"input_layer: categorical column {column.var_key!r} must be wrapped "
                f"in an indicator or embedding column")
        else:
            raise TypeError(f"input_layer: unsupported column {column!r}")
    return blocks[0] if len(blocks) == 1 else ops.concat(blocks, axis=1)


def total_input_dim(columns: Sequence[FeatureColumn]) -> int:
    return sum(c.output_dim for c in columns)


def linear_model(features: dict, columns: Sequence[FeatureColumn],
                 units: int = 1) -> Tensor:
    """Weighted sum of sparse/dense lookups plus a shared bias: [batch, units]."""
    if not columns:
        raise ValueError("linear_model: needs at least one column")
    graph = get_default_graph()
    terms = []
    for column in columns:
        if isinstance(column, NumericColumn):
            x = _dense_feature(features, column)
            w = graph.get_variable(f"{column.var_key}/weight", (column.dim, units),
                                   initializer=zeros_initializer(), reuse="auto")
            terms.append(ops.matmul(x, w.read()))
        elif isinstance(column, BucketizedColumn):
            dense = _dense_feature(features, column.source)
            hot = _bucketize(dense, column.boundaries, column.source.dim)
            w = graph.get_variable(f"{column.var_key}/weight",
                                   (column.output_dim, units),
                                   initializer=zeros_initializer(), reuse="auto")
            terms.append(ops.matmul(hot, w.read()))
        elif isinstance(column, _CATEGORICAL_TYPES):
            _check_categorical_features(features, column)
            counts = _categorical_matrix_tensor(graph, column, None, "linear")
            w = graph.get_variable(f"{column.var_key}/weight",
                                   (column.num_buckets, units),
                                   initializer=zeros_initializer(), reuse="auto")
            terms.append(ops.matmul(counts, w.read()))
        else:
            raise ValueError(
                f"linear_model: only numeric, bucketized, hashed, and crossed "
                f"columns are allowed, got {type(column).__name__}")
    bias = graph.get_variable("bias", (units,), initializer=zeros_initializer(),
                              reuse="auto")
    logits = terms[0]
    for t in terms[1:]:
        logits = ops.add(logits, t)
    return ops.add(logits, bias.read())


# ---------------------------------------------------------------------------
# JSON feature-spec round trip
# ---------------------------------------------------------------------------

def column_to_spec(column: FeatureColumn) -> dict:
    if isinstance(column, NumericColumn):
        return {"type": "numeric", "name": column.name, "dim": column.dim}
    if isinstance(column, BucketizedColumn):
        return {"type": "bucketized", "source": column_to_spec(column.source),
                "boundaries": list(column.boundaries)}
    if isinstance(column, HashedCategoricalColumn):
        return {"type": "hashed", "name": column.name, "num_buckets": column.num_buckets}
    if isinstance(column, CrossedColumn):
        return {"type": "crossed", "names": list(column.names),
                "num_buckets": column.num_buckets}
    if isinstance(column, IndicatorColumn):
        return {"type": "indicator", "categorical": column_to_spec(column.categorical)}
    if isinstance(column, EmbeddingColumn):
        return {"type": "embedding", "categorical": column_to_spec(column.categorical),
                "dimension": column.dimension, "combiner": column.combiner}
    if isinstance(column, SharedEmbeddingColumn):
        return {"type": "shared_embedding",
                "categorical": column_to_spec(column.categorical),
                "dimension": column.dimension, "shared_name": column.shared_name,
                "combiner": column.combiner}
    raise TypeError(f"cannot serialize column {column!r}")


def columns_to_spec(columns: Sequence[FeatureColumn]) -> list:
    return [column_to_spec(c) for c in columns]


def column_from_spec(spec: dict) -> FeatureColumn:
    kind = spec.get("type")
    if kind == "numeric":
        return NumericColumn(spec["name"], int(spec.get("dim", 1)))
    if kind == "bucketized":
        source = column_from_spec(spec["source"])
        if not isinstance(source, NumericColumn):
            raise ValueError("bucketized spec: source must be a numeric column spec")
        return BucketizedColumn(source, tuple(spec["boundaries"]))
    if kind == "hashed":
        return HashedCategoricalColumn(spec["name"], int(spec["num_buckets"]))
    if kind == "crossed":
        return CrossedColumn(tuple(spec["names"]), int(spec["num_buckets"]))
    if kind == "indicator":
        cat = column_from_spec(spec["categorical"])
        return indicator_column(cat)
    if kind == "embedding":
        cat = column_from_spec(spec["categorical"])
        return EmbeddingColumn(cat, int(spec["dimension"]),
                               spec.get("combiner", "mean"))
    if kind == "shared_embedding":
        cat = column_from_spec(spec["categorical"])
        return SharedEmbeddingColumn(cat, int(spec["dimension"]),
                                     spec["shared_name"],
                                     spec.get("combiner", "mean"))
    raise ValueError(f"unknown feature column type {kind!r}")


def columns_from_spec(specs: Sequence[dict]) -> list:
    return [column_from_spec(s) for s in specs]


def referenced_feature_names(columns: Sequence[FeatureColumn]) -> dict:
    """Map feature name -> "dense"|"categorical" for every referenced feature."""
    out: dict = {}

    def mark(name, kind):
        if out.get(name, kind) != kind:
            raise ValueError(
                f"feature {name!r} is used both as dense and categorical")
        out[name] = kind

    for column in columns:
        if isinstance(column, NumericColumn):
            mark(column.name, "dense")
        elif isinstance(column, BucketizedColumn):
            mark(column.source.name, "dense")
        elif isinstance(column, HashedCategoricalColumn):
            mark(column.name, "categorical")
        elif isinstance(column, CrossedColumn):
            for name in column.names:
                mark(name, "categorical")
        elif isinstance(column, (IndicatorColumn, EmbeddingColumn, SharedEmbeddingColumn)):
            cat = column.categorical
            if isinstance(cat, HashedCategoricalColumn):
                mark(cat.name, "categorical")
            else:
                for name in cat.names:
                    mark(name, "categorical")
    return out
